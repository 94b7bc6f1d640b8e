"""
Attention inspection and the cached-inference benchmark.

inspect_attention rolls one episode and exports, for the last decoder layer at every step,
how much each (temporal offset, state token) pair contributed to the cross-attention scores.
bench_inference counts multiply-accumulates and softmax widths of one inference step for
cached STA, STA recomputed from scratch and standard cross-attention.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from shared_utils import arrays_sha256, write_csv
from state_transition.attention import HistoryCache, RelativePositionTable, TokenBlock, sta_attention
from state_transition.errors import ConfigError, UsageError
from state_transition.evaluation import Regime
from state_transition.grid_env import EnvConfig, end_effector, env_reset, env_step, proprio_vector, render
from state_transition.policy import Observation, Policy, PolicyConfig, PolicyRunner, Variant
from state_transition.tensor import Tensor, counting

logger = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1
STA = "sta"
STANDARD = "standard"


@dataclass
class AttentionTrace:
    """
    One step of one layer. contributions [H, offsets, n]: for STA the share of each offset's
    routed transition scores landing on each current state token (summing over offsets gives
    the scores summed over decoder tokens); for standard attention the softmax mass on each
    windowed key. weights are the softmax rows: [H, m, n] for STA, [H, m, offsets, n] otherwise.
    """
    kind: str
    layer: int
    timestep: int
    contributions: np.ndarray
    weights: np.ndarray
    scores: Optional[np.ndarray] = None

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.contributions.shape[1])

    @property
    def token_sums(self) -> np.ndarray:
        "[H, offsets]: contributions summed over state tokens, per head"
        return self.contributions.sum(axis=-1)

    def heatmap(self) -> np.ndarray:
        "[offsets, n] averaged over heads"
        return self.contributions.mean(axis=0)


def trace_from_record(record: Dict[str, np.ndarray], kind: str, layer: int, timestep: int, d_head: int) -> AttentionTrace:
    "Build a trace from what a kernel recorder captured for a single cached step"
    weights = record["weights"][0, :, 0]
    if kind == STA:
        affinity = record["affinity"][0, :, 0]
        transition = record["transition"][0, :, 0]
        history = max(affinity.shape[1] - 1, 1)
        routed = np.einsum("hjil,hjlr->hjr", affinity, transition)
        contributions = routed / np.sqrt(d_head * d_head * history)
        return AttentionTrace(kind, layer, timestep, contributions, weights, scores=record["scores"][0, :, 0])

    heads, m, keys = weights.shape
    width = record["valid"].shape[1]
    weights = weights.reshape(heads, m, width, keys // width)
    return AttentionTrace(kind, layer, timestep, weights.sum(axis=1), weights, scores=record["scores"][0, :, 0])


@dataclass
class Inspection:
    traces: List[AttentionTrace]
    success: bool
    occluded: bool
    files: List[Path] = field(default_factory=list)
    # per traced step, before its action: distance to the current target and the holding flag
    target_distance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    holding: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def first_detour(self) -> Optional[int]:
        "Index of the first step whose action took the end-effector further from its target, if any"
        same_phase = self.holding[1:] == self.holding[:-1]
        grew = np.flatnonzero((np.diff(self.target_distance) > 1e-9) & same_phase)
        return int(grew[0]) if len(grew) else None


def inspect_attention(policy: Policy, episode_seed: int, out_dir: Optional[Path] = None,
                      env_config: Optional[EnvConfig] = None, regime: Regime = Regime.MIXED,
                      prefill_history: bool = False, allow_standard: bool = False) -> Inspection:
    """
    Roll one episode, tracing the last layer's cross-attention at every step. With
    prefill_history the window starts full of copies of the first step. Standard
    cross-attention checkpoints need allow_standard. Writes CSV tables when out_dir is given.
    """
    config = policy.config
    if config.variant == Variant.STANDARD_XATTN and not allow_standard:
        raise UsageError("This checkpoint uses standard cross-attention, which has no transition scores; "
                         "pass --allow-standard to export its attention weights instead")
    kind = STANDARD if config.variant == Variant.STANDARD_XATTN else STA
    env_config = env_config or EnvConfig()
    before = arrays_sha256(policy.arrays())

    runner = PolicyRunner(policy)
    state = env_reset(episode_seed, env_config, None, Regime(regime).occluded)
    if prefill_history:
        runner.prefill(Observation(render(state, env_config), proprio_vector(state, env_config)), config.k_max)

    traces: List[AttentionTrace] = []
    distances, holding = [], []
    done, success = False, False
    while not done:
        target = state.goal_pos if state.holding else state.object_pos
        distances.append(float(np.linalg.norm(end_effector(state.arm) - target)))
        holding.append(state.holding)
        captured: Dict[str, np.ndarray] = {}
        timestep = runner.timestep
        action = runner.step(Observation(render(state, env_config), proprio_vector(state, env_config)),
                             recorder=captured.update)
        traces.append(trace_from_record(captured, kind, config.n_layers - 1, timestep, config.attention.d_head))
        state, done, success = env_step(state, action, env_config)

    assert arrays_sha256(policy.arrays()) == before, "inspection changed the policy's parameters"
    inspection = Inspection(traces=traces, success=success, occluded=state.occluded,
                            target_distance=np.array(distances), holding=np.array(holding, dtype=bool))
    if out_dir is not None:
        inspection.files = write_traces(inspection, Path(out_dir), episode_seed, policy, prefill_history, regime)
    return inspection


def write_traces(inspection: Inspection, out_dir: Path, seed: int, policy: Policy, prefill_history: bool,
                 regime: Regime) -> List[Path]:
    traces = inspection.traces
    kind = traces[0].kind if traces else STA
    heads = policy.config.n_heads
    files = []

    for head in range(heads):
        files.append(write_csv(out_dir / f"trace_head{head}.csv", ["timestep", "offset", "state_token", "contribution"],
                               ((tr.timestep, offset, token, tr.contributions[head, offset, token])
                                for tr in traces for offset in tr.offsets
                                for token in range(tr.contributions.shape[2]))))
        if kind == STA:
            rows = ((tr.timestep, i, token, tr.weights[head, i, token])
                    for tr in traces for i in range(tr.weights.shape[1]) for token in range(tr.weights.shape[2]))
            header = ["timestep", "decoder_token", "state_token", "weight"]
        else:
            rows = ((tr.timestep, i, offset, token, tr.weights[head, i, offset, token])
                    for tr in traces for i in range(tr.weights.shape[1]) for offset in tr.offsets
                    for token in range(tr.weights.shape[3]))
            header = ["timestep", "decoder_token", "offset", "state_token", "weight"]
        files.append(write_csv(out_dir / f"weights_head{head}.csv", header, rows))

    files.append(write_csv(out_dir / "heatmap.csv", ["timestep", "offset", "state_token", "value"],
                           ((tr.timestep, offset, token, value) for tr in traces
                            for (offset, token), value in np.ndenumerate(tr.heatmap()))))
    files.append(write_csv(out_dir / "token_sums.csv", ["timestep", "head", "offset", "value"],
                           ((tr.timestep, head, offset, value) for tr in traces
                            for (head, offset), value in np.ndenumerate(tr.token_sums))))

    manifest = {
        "format_version": TRACE_FORMAT_VERSION,
        "kind": kind,
        "seed": seed,
        "regime": Regime(regime).value,
        "occluded": inspection.occluded,
        "success": inspection.success,
        "steps": len(traces),
        "first_detour": inspection.first_detour(),
        "prefill_history": prefill_history,
        "k_max": policy.config.k_max,
        "n_heads": heads,
        "layer": policy.config.n_layers - 1,
        "parameter_hash": arrays_sha256(policy.arrays()),
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(manifest_path)
    logger.info("Wrote %d attention tables to %s", len(files), out_dir)
    return files


@dataclass
class BenchConfig:
    history_lengths: Tuple[int, ...] = (0, 3, 7, 15, 31)
    repeats: int = 20

    def __post_init__(self) -> None:
        self.history_lengths = tuple(self.history_lengths)
        if not self.history_lengths or min(self.history_lengths) < 0:
            raise ConfigError(f"history_lengths must be a non-empty list of non-negative integers, "
                              f"got {list(self.history_lengths)}", field="history_lengths", bound=">= 0")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be at least 1, got {self.repeats}", field="repeats", bound=">= 1")


@dataclass
class BenchRow:
    history: int
    mode: str
    macs: int
    expected_macs: int
    softmax_width: int
    seconds_per_step: float


CACHED_STA = "sta_cached"
SCRATCH_STA = "sta_scratch"
CACHED_STANDARD = "standard_cached"


def sta_cached_macs(heads: int, m: int, n: int, d: int, history: int) -> int:
    "One cached STA step: the new step's affinity and value mix, plus the transition routing of every window step"
    return heads * (m * n * d + m * n * d) + heads * (history + 1) * (n * n * d + m * n * n)


def sta_scratch_macs(heads: int, m: int, n: int, d: int, history: int) -> int:
    return heads * (history + 1) * (m * n * d + n * n * d + m * n * n) + heads * m * n * d


def standard_macs(heads: int, m: int, n: int, d: int, history: int) -> int:
    return heads * (history + 1) * n * (m * d + m * d)


def _random_block(rng: np.random.Generator, timestep: int, heads: int, m: int, n: int, d: int,
                  with_s: bool = True) -> TokenBlock:
    return TokenBlock(timestep=timestep, q=Tensor(rng.normal(size=(heads, m, d))),
                      k=Tensor(rng.normal(size=(heads, n, d))), v=Tensor(rng.normal(size=(heads, n, d))),
                      s=Tensor(rng.normal(size=(heads, n, d))) if with_s else None)


def _measure(step: Callable[[], None], repeats: int) -> Tuple[int, Dict[int, int], float]:
    "MACs and softmax widths of one call, and the fastest of repeats timed calls"
    with counting() as counters:
        step()
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        step()
        best = min(best, time.perf_counter() - started)
    return counters.macs, dict(counters.softmax_widths), best


def bench_inference(config: PolicyConfig, bench: BenchConfig, seed: int = 0,
                    out_dir: Optional[Path] = None) -> List[BenchRow]:
    """
    Per-step cost of cross-attention at the policy's attention sizes for every history length
    in bench.history_lengths. MAC counts are checked against their closed forms and softmax
    widths against n (STA) and (k + 1) n (standard).
    """
    heads, d = config.n_heads, config.attention.d_head
    m, n = config.n_joints, config.n_state_tokens
    rng = np.random.default_rng(seed)
    pos = RelativePositionTable(Tensor(rng.normal(size=(heads, max(bench.history_lengths) + 1, d))))

    rows: List[BenchRow] = []
    for history in bench.history_lengths:
        steps = history + 2 + bench.repeats
        blocks = [_random_block(rng, t, heads, m, n, d) for t in range(steps)]
        cache = HistoryCache(history + 1)
        for block in blocks[:history]:
            cache.push(block)
        upcoming = iter(blocks[history:])

        def cached_step() -> None:
            cache.push(next(upcoming))
            cache.sta_step(pos)

        window = blocks[:history + 1]

        def scratch_step() -> None:
            sta_attention(window, window[-1], pos)

        standard_cache = HistoryCache(history + 1)
        for block in blocks[:history + 1]:
            standard_cache.push(block)

        def standard_step() -> None:
            standard_cache.standard_step(pos)

        expected = {CACHED_STA: (sta_cached_macs(heads, m, n, d, history), n),
                    SCRATCH_STA: (sta_scratch_macs(heads, m, n, d, history), n),
                    CACHED_STANDARD: (standard_macs(heads, m, n, d, history), (history + 1) * n)}
        for mode, step in ((CACHED_STA, cached_step), (SCRATCH_STA, scratch_step), (CACHED_STANDARD, standard_step)):
            macs, widths, seconds = _measure(step, bench.repeats)
            expected_macs, expected_width = expected[mode]
            assert macs == expected_macs, f"{mode} at k={history}: counted {macs} MACs, closed form gives {expected_macs}"
            assert widths == {expected_width: heads * m}, f"{mode} at k={history}: softmax widths {widths}"
            rows.append(BenchRow(history, mode, macs, expected_macs, expected_width, seconds))
        logger.info("k=%d: cached STA %d MACs, scratch STA %d, standard %d", history,
                    rows[-3].macs, rows[-2].macs, rows[-1].macs)
        if rows[-3].seconds_per_step > rows[-2].seconds_per_step:
            logger.warning("k=%d: cached STA step (%.2e s) was slower than recomputing (%.2e s)",
                           history, rows[-3].seconds_per_step, rows[-2].seconds_per_step)

    if out_dir is not None:
        path = write_csv(Path(out_dir) / "bench.csv",
                         ["history", "mode", "macs", "expected_macs", "softmax_width", "seconds_per_step"],
                         ((r.history, r.mode, r.macs, r.expected_macs, r.softmax_width, r.seconds_per_step)
                          for r in rows))
        logger.info("Wrote %s", path)
    return rows
