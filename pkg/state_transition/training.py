"""
Behaviour cloning on expert datasets: fixed-length sequence sampling, temporal masking of
visual input, the noise-masked MSE loss and the epoch loop with per-epoch validation.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from shared_utils import append_jsonl
from state_transition import tensor as T
from state_transition.checkpoint import Checkpoint, save_checkpoint
from state_transition.dataset import Dataset
from state_transition.errors import ConfigError, DimensionError, DivergenceError, UsageError
from state_transition.optim import DEFAULT_LEARNING_RATE, AdamState, adam_step
from state_transition.policy import Policy, forward_sequence
from state_transition.tensor import ComputationTape, Tensor

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


@dataclass
class TrainConfig:
    sequence_length: int = 16
    batch_size: int = 16
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = 50
    mask_enabled: bool = True
    eval_episodes: int = 100
    eval_seeds: int = 3
    # 0 picks enough batches to cover the dataset's steps once per epoch
    batches_per_epoch: int = 0

    def __post_init__(self) -> None:
        minimum = 4 if self.mask_enabled else 1
        if self.sequence_length < minimum:
            raise ConfigError(
                f"sequence_length {self.sequence_length} is too short"
                + (" for temporal masking (span lengths are drawn from [2, L/2])" if self.mask_enabled else ""),
                field="sequence_length", bound=f">= {minimum}")
        for name in ("batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}", field=name, bound=">= 1")
        for name in ("eval_episodes", "eval_seeds", "batches_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}", field=name, bound=">= 0")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}",
                              field="learning_rate", bound="> 0")


@dataclass
class TrainingSequence:
    obs: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    # False on noised and padded steps
    loss_mask: np.ndarray
    visual_masked: np.ndarray
    episode: int
    start: int
    padded: int = 0
    mask_span: Optional[Tuple[int, int]] = None

    def __len__(self) -> int:
        return len(self.actions)


def sample_training_sequences(dataset: Dataset, rng: np.random.Generator, config: TrainConfig) -> List[TrainingSequence]:
    """
    batch_size sequences of sequence_length consecutive steps, each from a uniformly drawn
    episode at a uniformly drawn start. Episodes shorter than the sequence are front-padded
    with copies of their first step, which are left out of the loss.
    """
    if len(dataset) == 0:
        raise UsageError("Cannot sample training sequences from an empty dataset")
    length = config.sequence_length
    batch = []
    for _ in range(config.batch_size):
        index = int(rng.integers(len(dataset)))
        episode = dataset.episodes[index]
        if len(episode) >= length:
            start = int(rng.integers(0, len(episode) - length + 1))
            rows = np.arange(start, start + length)
            padded = 0
        else:
            start = 0
            padded = length - len(episode)
            rows = np.concatenate([np.zeros(padded, dtype=int), np.arange(len(episode))])
        loss_mask = ~episode.noise_active[rows]
        loss_mask[:padded] = False
        batch.append(TrainingSequence(obs=episode.obs[rows], proprio=episode.proprio[rows],
                                      actions=episode.actions[rows], loss_mask=loss_mask,
                                      visual_masked=np.zeros(length, dtype=bool),
                                      episode=index, start=start, padded=padded))
    return batch


def apply_temporal_mask(sequence: TrainingSequence, rng: np.random.Generator, config: TrainConfig) -> TrainingSequence:
    "Hide visual input on a span of k in [2, L/2] steps placed uniformly in [1, L - k]"
    length = len(sequence)
    if length < 4:
        raise UsageError(f"Temporal masking needs sequences of at least 4 steps, got {length}")
    span = int(rng.integers(2, length // 2 + 1))
    start = int(rng.integers(1, length - span + 1))
    visual_masked = sequence.visual_masked.copy()
    visual_masked[start:start + span] = True
    return replace(sequence, visual_masked=visual_masked, mask_span=(start, span))


def masked_mse(predictions: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """
    Mean squared error over the steps where loss_mask is True and every joint.
    Returns a zero constant when no step is kept.
    """
    if predictions.shape != targets.shape:
        raise DimensionError(f"masked_mse: predictions {predictions.shape} and targets {targets.shape} differ")
    kept = int(loss_mask.sum())
    if kept == 0:
        logger.warning("Every step of the batch is excluded from the loss; using a loss of 0")
        return Tensor(0.0)

    weights = np.broadcast_to(loss_mask[..., None], targets.shape).astype(np.float64)
    # Excluded targets never reach the arithmetic, so garbage there cannot leak in
    clean_targets = np.where(weights > 0, targets, 0.0)
    error = T.mul(T.sub(predictions, Tensor(clean_targets)), Tensor(weights))
    return T.scale(T.sum_all(T.mul(error, error)), 1.0 / (kept * targets.shape[-1]))


def stack_batch(batch: List[TrainingSequence]) -> Tuple[np.ndarray, ...]:
    return (np.stack([s.obs for s in batch]), np.stack([s.proprio for s in batch]),
            np.stack([s.visual_masked for s in batch]), np.stack([s.actions for s in batch]),
            np.stack([s.loss_mask for s in batch]))


def compute_loss(batch: List[TrainingSequence], policy: Policy, config: TrainConfig) -> Tensor:
    "Every step predicts its action from its own causal history; noised and padded steps are left out"
    if not batch:
        raise UsageError("compute_loss needs a non-empty batch")
    obs, proprio, visual_masked, actions, loss_mask = stack_batch(batch)
    predictions = forward_sequence(policy, obs, proprio, visual_masked)
    return masked_mse(predictions, actions, loss_mask)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_success: Optional[float]
    eval_success_per_seed: List[float] = field(default_factory=list)


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_epoch: int
    best_success: Optional[float]
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None


# (policy, epoch) -> per-seed success rates
Validator = Callable[[Policy, int], List[float]]


def batches_per_epoch(dataset: Dataset, config: TrainConfig) -> int:
    if config.batches_per_epoch:
        return config.batches_per_epoch
    total_steps = sum(len(e) for e in dataset.episodes)
    return max(1, math.ceil(total_steps / (config.batch_size * config.sequence_length)))


def select_best(history: List[EpochRecord]) -> EpochRecord:
    "Highest validation success; ties go to the earliest epoch. Without validation, the last epoch."
    scored = [record for record in history if record.eval_success is not None]
    if not scored:
        return history[-1]
    best = max(record.eval_success for record in scored)
    winners = [record for record in scored if record.eval_success == best]
    if len(winners) > 1:
        logger.warning("Epochs %s tie at success %.3f; keeping epoch %d",
                       [r.epoch for r in winners], best, winners[0].epoch)
    return winners[0]


def train(policy: Policy, dataset: Dataset, config: TrainConfig, seed: int,
          out_dir: Optional[Path] = None, validator: Optional[Validator] = None,
          progress: bool = False) -> TrainResult:
    """
    Adam on the masked MSE for config.epochs epochs, validating after each one. With out_dir,
    writes metrics.jsonl (deterministic), timing.jsonl, best.ckpt and last.ckpt.
    """
    if len(dataset) == 0:
        raise UsageError("Cannot train on an empty dataset")
    if dataset.episodes[0].actions.shape[-1] != policy.config.n_joints:
        raise DimensionError(f"Dataset actions have {dataset.episodes[0].actions.shape[-1]} joints, "
                             f"the policy has {policy.config.n_joints}")
    rng = np.random.default_rng(seed)
    optimizer = AdamState(learning_rate=config.learning_rate)
    n_batches = batches_per_epoch(dataset, config)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name in (METRICS_FILE, TIMING_FILE):
            (out_dir / name).unlink(missing_ok=True)

    history: List[EpochRecord] = []
    best: Optional[EpochRecord] = None
    best_checkpoint = None
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        losses = []
        for batch_index in tqdm(range(n_batches), desc=f"epoch {epoch}", disable=not progress, leave=False):
            batch = sample_training_sequences(dataset, rng, config)
            if config.mask_enabled:
                batch = [apply_temporal_mask(sequence, rng, config) for sequence in batch]

            with ComputationTape() as tape:
                loss = compute_loss(batch, policy, config)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, batch_index, value)
            losses.append(value)
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch_index, value)
            if not tape.contains(loss):
                continue

            T.backward(loss, tape)
            adam_step(policy.arrays(), policy.gradients(), optimizer)
            policy.zero_grad()

        per_seed = validator(policy, epoch) if validator is not None else []
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)),
                             eval_success=float(np.mean(per_seed)) if per_seed else None,
                             eval_success_per_seed=[float(x) for x in per_seed])
        history.append(record)
        logger.info("epoch %d: train_loss %.6f, eval_success %s", epoch, record.train_loss,
                    "n/a" if record.eval_success is None else f"{record.eval_success:.3f}")

        # the same choice select_best makes over the history so far, so best.ckpt matches best_epoch
        if record.eval_success is None:
            improved = best is None or best.eval_success is None
        else:
            improved = best is None or best.eval_success is None or record.eval_success > best.eval_success
        if improved:
            best = record
        if out_dir is not None:
            append_jsonl(out_dir / METRICS_FILE, record.__dict__)
            append_jsonl(out_dir / TIMING_FILE, {"epoch": epoch, "wall_time": time.perf_counter() - started})
            if improved:
                best_checkpoint = save_checkpoint(out_dir / BEST_CHECKPOINT, Checkpoint.from_policy(
                    policy, optimizer, epoch=epoch, seed=seed, dataset=dataset.fingerprint,
                    eval_success=record.eval_success))
                logger.info("New best checkpoint at epoch %d", epoch)

    chosen = select_best(history)
    last_checkpoint = None
    if out_dir is not None:
        last_checkpoint = save_checkpoint(out_dir / LAST_CHECKPOINT, Checkpoint.from_policy(
            policy, optimizer, epoch=config.epochs, seed=seed, dataset=dataset.fingerprint,
            eval_success=history[-1].eval_success))
    return TrainResult(history=history, best_epoch=chosen.epoch, best_success=chosen.eval_success,
                       best_checkpoint=best_checkpoint, last_checkpoint=last_checkpoint)
