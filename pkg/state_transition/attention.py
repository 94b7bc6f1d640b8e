"""
Temporal cross-attention kernels.

Two operators relate the decoder tokens of the current step t to the state tokens of a
window of steps t-k..t:

- standard cross-attention: current queries against every key of the window, one softmax
  over all (k+1)*n keys, mixing every value of the window;
- state transition attention (STA): for each step tau of the window the same-time affinity
  A_tau = Q_tau K_tau^T (m x n) is routed through the transition scores
  (S_tau + e(t-tau)) (S_t + e(0))^T (n x n); the k+1 routed blocks are summed, scaled by
  1/sqrt(d_k d_s max(k, 1)), softmaxed over the n current state tokens and applied to V_t.

Every array carries a leading [batch, head] pair of axes. Window structure (which source
step feeds which offset of which target) is described by a WindowPlan, so the same kernels
serve full training sequences and single cached inference steps.
"""
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Sequence

import numpy as np

from state_transition import tensor as T
from state_transition.errors import ConfigError, DimensionError, SequencingError, UsageError
from state_transition.tensor import Tensor

logger = logging.getLogger(__name__)

Recorder = Callable[[Dict[str, np.ndarray]], None]


@dataclass
class AttentionConfig:
    d_model: int = 512
    n_heads: int = 8
    max_history: int = 15

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.d_model < 1:
            raise ConfigError(f"d_model ({self.d_model}) and n_heads ({self.n_heads}) must be positive",
                              field="n_heads", bound=">= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) is not divisible by n_heads ({self.n_heads})",
                              field="d_model", bound=f"multiple of n_heads ({self.n_heads})")
        if self.max_history < 0:
            raise ConfigError(f"max_history ({self.max_history}) must be non-negative",
                              field="max_history", bound=">= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    # Keys, transition projections and values all use the per-head width
    @property
    def d_k(self) -> int:
        return self.d_head

    @property
    def d_s(self) -> int:
        return self.d_head

    @property
    def d_v(self) -> int:
        return self.d_head


@dataclass
class TokenBlock:
    "Projected tokens of one timestep, per head: q [H,m,d_k], k [H,n,d_k], v [H,n,d_v], s [H,n,d_s]"
    timestep: int
    q: Tensor
    k: Tensor
    v: Tensor
    s: Optional[Tensor] = None

    @property
    def n_decoder_tokens(self) -> int:
        return self.q.shape[1]

    @property
    def n_state_tokens(self) -> int:
        return self.k.shape[1]


class RelativePositionTable:
    "Learned embedding e(delta) per head for temporal offsets delta = 0..k_max"

    def __init__(self, embeddings: Tensor) -> None:
        assert embeddings.ndim == 3, "expected [heads, k_max + 1, width]"
        self.embeddings = embeddings

    @property
    def max_offset(self) -> int:
        return self.embeddings.shape[1] - 1

    def window(self, width: int) -> Tensor:
        "e(0..width-1) shaped [1, H, 1, width, 1, d] to broadcast over windowed tokens"
        if width - 1 > self.max_offset:
            raise DimensionError(f"Offset {width - 1} is beyond the table's range 0..{self.max_offset}")
        heads, _, dim = self.embeddings.shape
        rows = T.take(self.embeddings, np.arange(width), axis=1)
        return T.reshape(rows, (1, heads, 1, width, 1, dim))

    def current(self) -> Tensor:
        "e(0) shaped [1, H, 1, 1, d]"
        heads, _, dim = self.embeddings.shape
        return T.reshape(T.take(self.embeddings, np.array([0]), axis=1), (1, heads, 1, 1, dim))


@dataclass(frozen=True)
class WindowPlan:
    """
    source_index[t, j] is the source step that target t sees at temporal offset j (offset 0
    is the target's own step); valid[t, j] says whether that offset exists for the target.
    """
    source_index: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return self.source_index.shape[1]

    @property
    def history(self) -> np.ndarray:
        "k of every target: how many past steps it sees"
        return self.valid.sum(axis=1) - 1

    @property
    def current_index(self) -> np.ndarray:
        return self.source_index[:, 0]

    def offset_mask(self, trailing_axes: int) -> np.ndarray:
        "valid shaped [1, 1, targets, width, 1, ...] for broadcasting"
        return self.valid.reshape((1, 1) + self.valid.shape + (1,) * trailing_axes)


def sequence_plan(length: int, history_limit: int) -> WindowPlan:
    "Sliding causal window: target t sees steps max(0, t - history_limit)..t"
    if length < 1:
        raise UsageError("A window needs at least one step")
    width = min(history_limit, length - 1) + 1
    targets = np.arange(length)[:, None]
    offsets = np.arange(width)[None, :]
    return WindowPlan(source_index=np.maximum(targets - offsets, 0), valid=offsets <= targets)


def window_plan(window_length: int) -> WindowPlan:
    "One target at the end of a window of window_length steps, ordered oldest first"
    if window_length < 1:
        raise UsageError("A window needs at least one step")
    return WindowPlan(source_index=np.arange(window_length)[::-1][None, :].copy(),
                      valid=np.ones((1, window_length), dtype=bool))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    "[B, T, tokens, d_model] -> [B, H, T, tokens, d_head]"
    batch, steps, tokens, d_model = x.shape
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model ({d_model}) is not divisible by n_heads ({n_heads})",
                          field="d_model", bound=f"multiple of n_heads ({n_heads})")
    return T.transpose(T.reshape(x, (batch, steps, tokens, n_heads, d_model // n_heads)), (0, 3, 1, 2, 4))


def merge_heads(x: Tensor) -> Tensor:
    "[B, H, T, tokens, d_head] -> [B, T, tokens, H * d_head], heads concatenated in order"
    batch, heads, steps, tokens, d_head = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1, 4)), (batch, steps, tokens, heads * d_head))


def affinity(q: Tensor, k: Tensor) -> Tensor:
    "Same-time affinities Q_tau K_tau^T of every step: [B,H,S,m,d] x [B,H,S,n,d] -> [B,H,S,m,n]"
    return T.einsum("bhtid,bhtjd->bhtij", q, k)


def sta_kernel(affinities: Tensor, d_k: int, s: Tensor, v: Tensor, pos: RelativePositionTable,
               plan: WindowPlan, recorder: Optional[Recorder] = None) -> Tensor:
    """
    State transition attention for every target of plan. affinities [B,H,S,m,n],
    s [B,H,S,n,d_s] and v [B,H,S,n,d_v] are indexed by source step. Returns [B,H,targets,m,d_v].
    """
    width = plan.width
    windowed_affinity = T.mul(T.take(affinities, plan.source_index, axis=2), Tensor(plan.offset_mask(2)))
    past_states = T.add(T.take(s, plan.source_index, axis=2), pos.window(width))
    current_states = T.add(T.take(s, plan.current_index, axis=2), pos.current())

    transition = T.einsum("bhtjld,bhtrd->bhtjlr", past_states, current_states)
    routed = T.einsum("bhtjil,bhtjlr->bhtir", windowed_affinity, transition)

    history = np.maximum(plan.history, 1).astype(np.float64)
    inverse_scale = 1.0 / np.sqrt(d_k * s.shape[-1] * history)
    scores = T.mul(routed, Tensor(inverse_scale.reshape(1, 1, -1, 1, 1)))
    weights = T.softmax_rows(scores)
    out = T.einsum("bhtir,bhtrd->bhtid", weights, T.take(v, plan.current_index, axis=2))

    if recorder is not None:
        recorder({
            "transition": transition.data,
            "affinity": windowed_affinity.data,
            "scores": scores.data,
            "weights": weights.data,
            "valid": plan.valid,
        })
    return out


def standard_kernel(q: Tensor, k: Tensor, v: Tensor, pos: RelativePositionTable,
                    plan: WindowPlan, recorder: Optional[Recorder] = None) -> Tensor:
    """
    Standard cross-attention for every target of plan: q [B,H,targets,m,d_k] against the
    windowed keys k [B,H,S,n,d_k] (each carrying its offset embedding p(t - tau)), one softmax
    over all valid (offset, token) pairs, mixing the windowed values v [B,H,S,n,d_v].
    """
    batch, heads, targets, m, d_k = q.shape
    n, d_v = v.shape[3], v.shape[4]
    width = plan.width

    keys = T.add(T.take(k, plan.source_index, axis=2), pos.window(width))
    scores = T.einsum("bhtid,bhtjld->bhtijl", q, keys)
    scores = T.reshape(T.scale(scores, 1.0 / np.sqrt(d_k)), (batch, heads, targets, m, width * n))

    mask = np.repeat(plan.valid, n, axis=1).reshape(1, 1, targets, 1, width * n)
    weights = T.softmax_rows(scores, mask)
    values = T.reshape(T.take(v, plan.source_index, axis=2), (batch, heads, targets, width * n, d_v))
    out = T.einsum("bhtiz,bhtzd->bhtid", weights, values)

    if recorder is not None:
        recorder({
            "scores": scores.data,
            "weights": weights.data,
            "valid": plan.valid,
        })
    return out


def windowed_self_attention(q: Tensor, k: Tensor, v: Tensor, plan: WindowPlan) -> Tensor:
    """
    Self-attention at timestep granularity: a token of target step t attends to every token
    of every step in its window (its own step's siblings included). q [B,H,targets,m,d],
    k and v [B,H,S,m,d] indexed by source step.
    """
    batch, heads, targets, m, d = q.shape
    width = plan.width
    keys = T.take(k, plan.source_index, axis=2)
    scores = T.einsum("bhtid,bhtjld->bhtijl", q, keys)
    scores = T.reshape(T.scale(scores, 1.0 / np.sqrt(d)), (batch, heads, targets, m, width * m))
    mask = np.repeat(plan.valid, m, axis=1).reshape(1, 1, targets, 1, width * m)
    weights = T.softmax_rows(scores, mask)
    values = T.reshape(T.take(v, plan.source_index, axis=2), (batch, heads, targets, width * m, d))
    return T.einsum("bhtiz,bhtzd->bhtid", weights, values)


def multi_head(config: AttentionConfig, inner: Callable[..., Tensor], out_weight: Tensor, **head_inputs) -> Tensor:
    """
    Run inner on head-batched projections (each [B, H, ...]), concatenate the per-head outputs
    in head order and apply the output projection. Returns [B, T, tokens, d_model].
    """
    for name, value in head_inputs.items():
        if isinstance(value, Tensor) and value.ndim >= 2 and value.shape[1] != config.n_heads:
            raise DimensionError(f"multi_head: {name} has {value.shape[1]} heads, config expects {config.n_heads}")
    return T.linear(merge_heads(inner(**head_inputs)), out_weight)


def _stack_window(blocks: Sequence[TokenBlock], field_name: str) -> Tensor:
    "Stack one field of consecutive blocks to [1, H, steps, tokens, d]"
    stacked = T.stack([getattr(block, field_name) for block in blocks], axis=1)
    return T.reshape(stacked, (1,) + stacked.shape)


def _check_window(window: Sequence[TokenBlock], current: Optional[TokenBlock] = None) -> None:
    if len(window) == 0:
        raise UsageError("Attention needs a non-empty window")
    for earlier, later in zip(window[:-1], window[1:]):
        if later.timestep != earlier.timestep + 1:
            raise SequencingError(f"Window timesteps jump from {earlier.timestep} to {later.timestep}")
    if current is not None and window[-1] is not current and window[-1].timestep != current.timestep:
        raise SequencingError(
            f"The window ends at step {window[-1].timestep} but the current block is step {current.timestep}")
    shapes = {(b.k.shape[1], b.v.shape[1]) for b in window}
    query_counts = {b.q.shape[1] for b in window}
    if len(shapes) > 1 or len(query_counts) > 1:
        raise DimensionError(f"Token counts differ across the window: state {shapes}, decoder {query_counts}")


def standard_cross_attention(q_t: Tensor, window: Sequence[TokenBlock], pos: RelativePositionTable,
                             recorder: Optional[Recorder] = None) -> Tensor:
    "Standard attention of the current queries q_t [H,m,d_k] over a window of blocks; returns [H,m,d_v]"
    _check_window(window)
    q = T.reshape(q_t, (1, q_t.shape[0], 1) + q_t.shape[1:])
    out = standard_kernel(q, _stack_window(window, "k"), _stack_window(window, "v"), pos,
                          window_plan(len(window)), recorder)
    return T.reshape(out, out.shape[1:2] + out.shape[3:])


def sta_scores(window: Sequence[TokenBlock], current: TokenBlock, pos: RelativePositionTable) -> Tensor:
    "The pre-softmax STA scores Z of the current step, [H, m, n]"
    captured: Dict[str, np.ndarray] = {}
    sta_attention(window, current, pos, recorder=captured.update)
    return Tensor(captured["scores"][0, :, 0])


def sta_attention(window: Sequence[TokenBlock], current: TokenBlock, pos: RelativePositionTable,
                  recorder: Optional[Recorder] = None) -> Tensor:
    "STA output of the current step, [H, m, d_v]; window is ordered oldest first and ends at current"
    _check_window(window, current)
    if any(block.s is None for block in window):
        raise UsageError("STA needs transition projections (s) on every block of the window")

    q = _stack_window(window, "q")
    k = _stack_window(window, "k")
    out = sta_kernel(affinity(q, k), q.shape[-1], _stack_window(window, "s"), _stack_window(window, "v"),
                     pos, window_plan(len(window)), recorder)
    return T.reshape(out, out.shape[1:2] + out.shape[3:])


def causal_self_attention(tokens: Tensor, tokens_per_step: int, config: AttentionConfig,
                          weights: Dict[str, Tensor]) -> Tensor:
    """
    Multi-head self-attention over time-major tokens [(k+1)*m, d_model] with a causal mask at
    timestep granularity. weights holds "q", "k", "v" and "o" projections [d_model, d_model].
    """
    count, d_model = tokens.shape
    if count % tokens_per_step != 0:
        raise DimensionError(f"{count} tokens cannot be split into steps of {tokens_per_step}")
    steps = count // tokens_per_step
    x = T.reshape(tokens, (1, steps, tokens_per_step, d_model))

    heads = {name: split_heads(T.linear(x, weights[name]), config.n_heads) for name in ("q", "k", "v")}
    plan = sequence_plan(steps, steps - 1)
    out = multi_head(config, lambda q, k, v: windowed_self_attention(q, k, v, plan), weights["o"], **heads)
    return T.reshape(out, (count, d_model))


class HistoryCache:
    """
    Ring buffer of the last capacity TokenBlocks of one layer, plus each block's same-time
    affinity A_tau = Q_tau K_tau^T computed once, when tau was the current step.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise UsageError(f"A history cache needs room for at least one step, got {capacity}")
        self.capacity = capacity
        self.blocks: Deque[TokenBlock] = deque(maxlen=capacity)
        self.same_time_affinity: Deque[Tensor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def last_timestep(self) -> Optional[int]:
        return self.blocks[-1].timestep if self.blocks else None

    def push(self, block: TokenBlock) -> None:
        if self.blocks and block.timestep != self.last_timestep + 1:
            raise SequencingError(f"Cannot push step {block.timestep} after step {self.last_timestep}")
        if len(self.blocks) == self.capacity:
            logger.debug("Evicting step %d from history cache", self.blocks[0].timestep)

        self.blocks.append(block)
        self.same_time_affinity.append(T.einsum("hid,hjd->hij", block.q, block.k))

    def window(self, history_limit: Optional[int] = None) -> List[TokenBlock]:
        "Cached blocks of the last history_limit + 1 steps, oldest first"
        blocks = list(self.blocks)
        return blocks if history_limit is None else blocks[max(0, len(blocks) - history_limit - 1):]

    def window_affinities(self, history_limit: Optional[int] = None) -> List[Tensor]:
        affinities = list(self.same_time_affinity)
        return affinities if history_limit is None else affinities[max(0, len(affinities) - history_limit - 1):]

    def sta_step(self, pos: RelativePositionTable, history_limit: Optional[int] = None,
                 recorder: Optional[Recorder] = None) -> Tensor:
        "STA output [H, m, d_v] of the newest step, reusing cached projections and affinities"
        window = self.window(history_limit)
        if not window:
            raise UsageError("The history cache is empty")
        affinities = T.stack(self.window_affinities(history_limit), axis=1)
        affinities = T.reshape(affinities, (1,) + affinities.shape)
        out = sta_kernel(affinities, window[-1].q.shape[-1], _stack_window(window, "s"),
                         _stack_window(window, "v"), pos, window_plan(len(window)), recorder)
        return T.reshape(out, out.shape[1:2] + out.shape[3:])

    def standard_step(self, pos: RelativePositionTable, history_limit: Optional[int] = None,
                      recorder: Optional[Recorder] = None) -> Tensor:
        "Standard cross-attention output [H, m, d_v] of the newest step over the cached keys and values"
        window = self.window(history_limit)
        if not window:
            raise UsageError("The history cache is empty")
        return standard_cross_attention(window[-1].q, window, pos, recorder)


def cache_push(cache: HistoryCache, block: TokenBlock) -> HistoryCache:
    cache.push(block)
    return cache
