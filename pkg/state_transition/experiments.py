"""
Train-and-evaluate grids: the temporal-masking ablation, the history-length ablation and the
successful-only versus recovery-rich data comparison. Each writes one CSV table.
"""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from shared_utils import write_csv
from state_transition.checkpoint import load_checkpoint
from state_transition.dataset import Dataset, generate_dataset
from state_transition.errors import UsageError
from state_transition.evaluation import evaluate_seeds, make_validator
from state_transition.policy import Policy, Variant
from state_transition.run_config import RunConfig, write_resolved_config
from state_transition.training import TrainResult, train

logger = logging.getLogger(__name__)

DEFAULT_HISTORIES = (15, 7, 3, 1, 0)


def train_policy(run: RunConfig, dataset: Dataset, seed: int, out_dir: Path, variant: Optional[Variant] = None,
                 mask_enabled: Optional[bool] = None, k_max: Optional[int] = None,
                 progress: bool = False) -> Tuple[Policy, TrainResult]:
    "Train a fresh policy and return its best validation checkpoint"
    policy_config = replace(run.policy, variant=variant or run.policy.variant,
                            k_max=run.policy.k_max if k_max is None else k_max)
    train_config = replace(run.train, mask_enabled=run.train.mask_enabled if mask_enabled is None else mask_enabled)
    resolved = replace(run, policy=policy_config, train=train_config)
    write_resolved_config(resolved, out_dir)

    policy = Policy.initialize(policy_config, seed)
    validator = make_validator(train_config, run.eval, run.env, seed)
    result = train(policy, dataset, train_config, seed, out_dir, validator, progress)
    if result.best_checkpoint is not None:
        policy = load_checkpoint(result.best_checkpoint).policy()
    return policy, result


def _log_rows(title: str, rows: List[Dict]) -> None:
    for row in rows:
        logger.info("%s: %s", title, ", ".join(f"{key}={value}" for key, value in row.items()))


def ablate_masking(run: RunConfig, dataset: Dataset, seed: int, out_dir: Path,
                   variants: Sequence[Variant] = (Variant.STA, Variant.STANDARD_XATTN),
                   progress: bool = False) -> List[Dict]:
    "Each variant trained without and with temporal masking, evaluated with complete and masked inference"
    out_dir = Path(out_dir)
    rows = []
    for variant in variants:
        for mask_enabled in (False, True):
            name = f"{Variant(variant).value}_{'masked' if mask_enabled else 'unmasked'}"
            policy, _ = train_policy(run, dataset, seed, out_dir / name, variant=variant,
                                     mask_enabled=mask_enabled, progress=progress)
            complete = evaluate_seeds(policy, run.train, run.eval, run.env, seed, masked_inference=False)
            masked = evaluate_seeds(policy, run.train, run.eval, run.env, seed, masked_inference=True)
            rows.append({"variant": Variant(variant).value, "trained_with_mask": mask_enabled,
                         "complete": complete.mean, "masked": masked.mean})
    _log_rows("masking ablation", rows)
    write_csv(out_dir / "masking_ablation.csv", list(rows[0]), (list(row.values()) for row in rows))
    return rows


def ablate_history(run: RunConfig, policy: Policy, seed: int, out_dir: Path,
                   histories: Sequence[int] = DEFAULT_HISTORIES, dataset: Optional[Dataset] = None,
                   train_references: bool = False, progress: bool = False) -> List[Dict]:
    """
    policy evaluated with its inference history truncated to each length. With
    train_references, a policy trained with that history length is evaluated next to it.
    """
    out_dir = Path(out_dir)
    if train_references and dataset is None:
        raise UsageError("Reference policies need a dataset to train on")
    rows = []
    for history in histories:
        if history > policy.config.k_max:
            logger.warning("Skipping history %d: the policy was trained with %d", history, policy.config.k_max)
            continue
        truncated = evaluate_seeds(policy, run.train, run.eval, run.env, seed, inference_history=history)
        row = {"history": history, "truncated": truncated.mean, "reference": ""}
        if train_references:
            if history == policy.config.k_max:
                row["reference"] = truncated.mean
            else:
                reference, _ = train_policy(run, dataset, seed, out_dir / f"reference_k{history}",
                                            k_max=history, progress=progress)
                row["reference"] = evaluate_seeds(reference, run.train, run.eval, run.env, seed).mean
        rows.append(row)
    _log_rows("history ablation", rows)
    write_csv(out_dir / "history_ablation.csv", ["history", "truncated", "reference"],
              ([row["history"], row["truncated"], row["reference"]] for row in rows))
    return rows


def compare_data(run: RunConfig, seed: int, out_dir: Path,
                 variants: Sequence[Variant] = (Variant.STA, Variant.STANDARD_XATTN, Variant.NO_HISTORY),
                 progress: bool = False) -> List[Dict]:
    "Every variant trained on successful-only and on recovery-rich demonstrations of the same size"
    out_dir = Path(out_dir)
    datasets = {
        label: generate_dataset(out_dir / f"data_{label}", run.data.episodes, noise_on=noise_on, seed=seed,
                                env_config=run.env, noise_config=run.noise, workers=run.data.workers,
                                progress=progress)
        for label, noise_on in (("successful_only", False), ("recovery_rich", True))
    }
    rows = []
    for variant in variants:
        for label, dataset in datasets.items():
            policy, _ = train_policy(run, dataset, seed, out_dir / f"{Variant(variant).value}_{label}",
                                     variant=variant, progress=progress)
            report = evaluate_seeds(policy, run.train, run.eval, run.env, seed)
            rows.append({"variant": Variant(variant).value, "data": label, "success": report.mean})
    _log_rows("data comparison", rows)
    write_csv(out_dir / "data_comparison.csv", ["variant", "data", "success"],
              ([row["variant"], row["data"], row["success"]] for row in rows))
    return rows
