import json
from pathlib import Path

import numpy as np
import pytest

from shared_utils import arrays_sha256, read_csv
from state_transition.analysis import (
    CACHED_STA,
    CACHED_STANDARD,
    SCRATCH_STA,
    BenchConfig,
    Inspection,
    bench_inference,
    inspect_attention,
)
from state_transition.errors import ConfigError, UsageError
from state_transition.evaluation import Regime
from state_transition.grid_env import EnvConfig
from state_transition.policy import PolicyConfig, Variant
from state_transition.verify_policy import random_policy

SMALL_ENV = EnvConfig(grid_size=8, horizon=20)


def small_config(variant: Variant = Variant.STA, **overrides) -> PolicyConfig:
    settings = dict(variant=variant, n_layers=2, d_model=8, n_heads=2, k_max=3, obs_grid=SMALL_ENV.obs_shape,
                    proprio_dim=SMALL_ENV.proprio_dim, conv_channels=(2, 3), head_hidden=4)
    settings.update(overrides)
    return PolicyConfig(**settings)


class VerifyInspectAttention:
    def verify_window_shapes(self) -> None:
        config = small_config()
        inspection = inspect_attention(random_policy(config, seed=0), 3, env_config=SMALL_ENV)
        assert len(inspection.traces) > 1
        for trace in inspection.traces:
            width = min(trace.timestep, config.k_max) + 1
            assert trace.heatmap().shape == (width, config.n_state_tokens)
            assert trace.offsets.max() <= min(trace.timestep, config.k_max)
            assert trace.token_sums.shape == (config.n_heads, width)
            assert trace.layer == config.n_layers - 1

    def verify_weight_rows_sum_to_one(self) -> None:
        inspection = inspect_attention(random_policy(small_config(), seed=1), 4, env_config=SMALL_ENV)
        for trace in inspection.traces:
            assert np.max(np.abs(trace.weights.sum(axis=-1) - 1.0)) < 1e-9

    def verify_contributions_add_up_to_scores(self) -> None:
        inspection = inspect_attention(random_policy(small_config(), seed=2), 5, env_config=SMALL_ENV)
        for trace in inspection.traces:
            assert np.allclose(trace.contributions.sum(axis=1), trace.scores.sum(axis=1), rtol=1e-10, atol=1e-12)

    def verify_parameters_untouched(self, tmp_path: Path) -> None:
        policy = random_policy(small_config(), seed=3)
        before = arrays_sha256(policy.arrays())
        inspect_attention(policy, 0, out_dir=tmp_path, env_config=SMALL_ENV)
        assert arrays_sha256(policy.arrays()) == before
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["parameter_hash"] == before and manifest["kind"] == "sta"

    def verify_prefill_fills_the_window(self) -> None:
        config = small_config()
        inspection = inspect_attention(random_policy(config, seed=4), 1, env_config=SMALL_ENV, prefill_history=True)
        first = inspection.traces[0]
        assert first.timestep == config.k_max
        assert first.heatmap().shape[0] == config.k_max + 1

    def verify_tables(self, tmp_path: Path) -> None:
        config = small_config()
        inspection = inspect_attention(random_policy(config, seed=5), 2, out_dir=tmp_path, env_config=SMALL_ENV,
                                       regime=Regime.OCCLUDED)
        assert inspection.occluded
        heatmap = read_csv(tmp_path / "heatmap.csv")
        expected_rows = sum((min(t.timestep, config.k_max) + 1) * config.n_state_tokens for t in inspection.traces)
        assert len(heatmap) == expected_rows
        for head in range(config.n_heads):
            assert (tmp_path / f"trace_head{head}.csv").exists()
            weights = read_csv(tmp_path / f"weights_head{head}.csv")
            assert len(weights) == len(inspection.traces) * config.n_joints * config.n_state_tokens
        sums = read_csv(tmp_path / "token_sums.csv")
        first = inspection.traces[0]
        assert float(sums[0]["value"]) == first.token_sums[0, 0]

    def verify_tables_deterministic(self, tmp_path: Path) -> None:
        policy = random_policy(small_config(), seed=6)
        inspect_attention(policy, 7, out_dir=tmp_path / "a", env_config=SMALL_ENV)
        inspect_attention(policy, 7, out_dir=tmp_path / "b", env_config=SMALL_ENV)
        for name in ("heatmap.csv", "token_sums.csv", "trace_head0.csv", "weights_head1.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def verify_distance_profile(self, tmp_path: Path) -> None:
        inspection = inspect_attention(random_policy(small_config(), seed=10), 6, out_dir=tmp_path,
                                       env_config=SMALL_ENV)
        assert len(inspection.target_distance) == len(inspection.holding) == len(inspection.traces)
        assert np.all(inspection.target_distance >= 0.0)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["first_detour"] == inspection.first_detour()

    def verify_first_detour(self) -> None:
        inspection = Inspection(traces=[], success=True, occluded=True,
                                target_distance=np.array([5.0, 4.0, 4.5, 3.0, 0.5, 6.0, 7.0]),
                                holding=np.array([False, False, False, False, False, True, True]))
        # the jump from step 4 to 5 is the switch to the goal, not a detour
        assert inspection.first_detour() == 1
        inspection.target_distance[2] = 3.5
        assert inspection.first_detour() == 5
        inspection.target_distance[6] = 5.0
        assert inspection.first_detour() is None

    def verify_standard_needs_flag(self) -> None:
        policy = random_policy(small_config(Variant.STANDARD_XATTN), seed=7)
        with pytest.raises(UsageError, match="allow-standard"):
            inspect_attention(policy, 0, env_config=SMALL_ENV)

    def verify_standard_export(self, tmp_path: Path) -> None:
        config = small_config(Variant.STANDARD_XATTN)
        inspection = inspect_attention(random_policy(config, seed=8), 0, out_dir=tmp_path, env_config=SMALL_ENV,
                                       allow_standard=True)
        for trace in inspection.traces:
            width = min(trace.timestep, config.k_max) + 1
            assert trace.weights.shape == (config.n_heads, config.n_joints, width, config.n_state_tokens)
            assert np.allclose(trace.weights.sum(axis=(2, 3)), 1.0, atol=1e-9)
            assert np.allclose(trace.contributions.sum(axis=(1, 2)), config.n_joints, atol=1e-9)
        assert json.loads((tmp_path / "manifest.json").read_text())["kind"] == "standard"

    def verify_no_history_sees_only_the_current_step(self) -> None:
        inspection = inspect_attention(random_policy(small_config(Variant.NO_HISTORY), seed=9), 0,
                                       env_config=SMALL_ENV)
        assert all(trace.contributions.shape[1] == 1 for trace in inspection.traces)


class VerifyBench:
    config = small_config(k_max=15)

    def verify_counts_and_widths(self, tmp_path: Path) -> None:
        rows = bench_inference(self.config, BenchConfig(repeats=2), out_dir=tmp_path)
        assert len(rows) == 15
        n = self.config.n_state_tokens
        for row in rows:
            assert row.macs == row.expected_macs
            assert row.softmax_width == (n if row.mode != CACHED_STANDARD else (row.history + 1) * n)
        assert len(read_csv(tmp_path / "bench.csv")) == 15

    def verify_cached_slope(self) -> None:
        rows = bench_inference(self.config, BenchConfig(history_lengths=(3, 7), repeats=1))
        cached = {r.history: r.macs for r in rows if r.mode == CACHED_STA}
        heads, d = self.config.n_heads, self.config.attention.d_head
        m, n = self.config.n_joints, self.config.n_state_tokens
        assert (cached[7] - cached[3]) == 4 * heads * (n * n * d + m * n * n)

    def verify_cache_saves_work(self) -> None:
        rows = bench_inference(self.config, BenchConfig(history_lengths=(15,), repeats=1))
        macs = {r.mode: r.macs for r in rows}
        assert macs[CACHED_STA] < macs[SCRATCH_STA]

    def verify_config_ranges(self) -> None:
        with pytest.raises(ConfigError):
            BenchConfig(history_lengths=())
        with pytest.raises(ConfigError):
            BenchConfig(repeats=0)
