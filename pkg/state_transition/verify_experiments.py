from pathlib import Path

import pytest

from shared_utils import read_csv
from state_transition.errors import UsageError
from state_transition.experiments import ablate_history, ablate_masking, compare_data, train_policy
from state_transition.policy import Policy, Variant
from state_transition.run_config import RESOLVED_CONFIG_FILE, load_config, parse_config
from state_transition.verify_training import small_dataset

MICRO = parse_config("""
env:
  grid_size: 8
  horizon: 30
policy:
  n_layers: 1
  d_model: 8
  n_heads: 2
  k_max: 3
  conv_channels: [2, 3]
  head_hidden: 4
train:
  epochs: 1
  batch_size: 2
  sequence_length: 4
  batches_per_epoch: 2
  eval_episodes: 2
  eval_seeds: 1
data:
  episodes: 4
""")


def verify_train_policy_overrides(tmp_path: Path) -> None:
    policy, result = train_policy(MICRO, small_dataset(4), 0, tmp_path, variant=Variant.STANDARD_XATTN,
                                  mask_enabled=False, k_max=2)
    assert policy.config.variant == Variant.STANDARD_XATTN and policy.config.k_max == 2
    resolved = load_config(tmp_path / RESOLVED_CONFIG_FILE)
    assert resolved.policy.k_max == 2 and not resolved.train.mask_enabled
    assert result.best_checkpoint is not None


def verify_masking_grid(tmp_path: Path) -> None:
    rows = ablate_masking(MICRO, small_dataset(4), 0, tmp_path)
    assert [(row["variant"], row["trained_with_mask"]) for row in rows] == [
        ("sta", False), ("sta", True), ("standard_xattn", False), ("standard_xattn", True)]
    table = read_csv(tmp_path / "masking_ablation.csv")
    assert len(table) == 4
    assert all(0.0 <= float(row["complete"]) <= 1.0 and 0.0 <= float(row["masked"]) <= 1.0 for row in table)
    assert (tmp_path / "sta_masked" / "best.ckpt").exists()


class VerifyHistoryAblation:
    policy = Policy.initialize(MICRO.policy, seed=0)

    def verify_truncated_rows(self, tmp_path: Path) -> None:
        rows = ablate_history(MICRO, self.policy, 0, tmp_path, histories=(7, 3, 1, 0))
        # 7 is longer than the window the policy was built with
        assert [row["history"] for row in rows] == [3, 1, 0]
        assert all(row["reference"] == "" for row in rows)
        assert len(read_csv(tmp_path / "history_ablation.csv")) == 3

    def verify_references(self, tmp_path: Path) -> None:
        rows = ablate_history(MICRO, self.policy, 0, tmp_path, histories=(3, 1), dataset=small_dataset(4),
                              train_references=True)
        assert rows[0]["reference"] == rows[0]["truncated"]
        assert 0.0 <= rows[1]["reference"] <= 1.0
        assert (tmp_path / "reference_k1" / RESOLVED_CONFIG_FILE).exists()
        assert not (tmp_path / "reference_k3").exists()

    def verify_references_need_data(self, tmp_path: Path) -> None:
        with pytest.raises(UsageError, match="dataset"):
            ablate_history(MICRO, self.policy, 0, tmp_path, train_references=True)


def verify_data_comparison(tmp_path: Path) -> None:
    rows = compare_data(MICRO, 0, tmp_path, variants=(Variant.STA, Variant.NO_HISTORY))
    assert [(row["variant"], row["data"]) for row in rows] == [
        ("sta", "successful_only"), ("sta", "recovery_rich"),
        ("no_history", "successful_only"), ("no_history", "recovery_rich")]
    for label in ("successful_only", "recovery_rich"):
        assert (tmp_path / f"data_{label}" / "manifest.json").exists()
    assert len(read_csv(tmp_path / "data_comparison.csv")) == 4
