"""
Closed-loop evaluation of a policy in the grid task, with optional truncated inference
history and masked-inference visual dropout.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from state_transition.errors import ConfigError, DimensionError, UsageError
from state_transition.grid_env import EnvConfig, env_reset, env_step, proprio_vector, render
from state_transition.policy import Observation, Policy, PolicyRunner
from state_transition.training import TrainConfig, Validator

logger = logging.getLogger(__name__)

# Evaluation seeds of one repetition are spaced this far apart
SEED_STRIDE = 10_000
# Per-epoch validation blocks start this far into each stride
VALIDATION_SHIFT = SEED_STRIDE // 2


class Regime(str, Enum):
    "Which episodes hide the object after the first step"
    MIXED = "mixed"
    OCCLUDED = "occluded"
    UNOCCLUDED = "unoccluded"

    @property
    def occluded(self) -> Optional[bool]:
        return {Regime.MIXED: None, Regime.OCCLUDED: True, Regime.UNOCCLUDED: False}[self]


@dataclass
class EvalConfig:
    regime: Regime = Regime.MIXED
    masked_inference: bool = False
    # None uses the policy's full window
    inference_history: Optional[int] = None
    mask_resample_prob: float = 0.1
    # Added to every evaluation seed so rollouts never reuse dataset seeds
    seed_offset: int = 1_000_000
    workers: int = 1

    def __post_init__(self) -> None:
        self.regime = Regime(self.regime)
        if self.inference_history is not None and self.inference_history < 0:
            raise ConfigError(f"inference_history must be non-negative, got {self.inference_history}",
                              field="inference_history", bound=">= 0")
        if not 0.0 <= self.mask_resample_prob <= 1.0:
            raise ConfigError(f"mask_resample_prob must be a probability, got {self.mask_resample_prob}",
                              field="mask_resample_prob", bound="[0, 1]")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}", field="workers", bound=">= 1")


class InferenceMask:
    """
    Visual dropout for masked inference: runs of n consecutive masked steps with n uniform in
    [0, L - 1]. When a run is used up the step is shown, and with probability resample_prob
    a new run is drawn to start on the next step. The first step is always shown.
    """

    def __init__(self, rng: np.random.Generator, sequence_length: int, resample_prob: float) -> None:
        self.rng = rng
        self.sequence_length = sequence_length
        self.resample_prob = resample_prob
        self.remaining = 0

    def next(self) -> bool:
        if self.remaining > 0:
            self.remaining -= 1
            return True
        if self.rng.random() < self.resample_prob:
            self.remaining = int(self.rng.integers(0, self.sequence_length))
        return False


@dataclass
class EpisodeOutcome:
    seed: int
    success: bool
    steps: int
    masked_steps: int = 0


@dataclass
class EvalReport:
    per_seed: List[float]
    seeds: List[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed)) if self.per_seed else 0.0


def _resolve_history(policy: Policy, inference_history: Optional[int]) -> int:
    k_max = policy.config.k_max
    if inference_history is None:
        return k_max
    if inference_history < 0:
        raise UsageError(f"inference_history must be non-negative, got {inference_history}")
    if inference_history > k_max:
        logger.debug("inference_history %d exceeds the policy's window of %d steps; using %d",
                     inference_history, k_max, k_max)
        return k_max
    return inference_history


def run_episode(policy: Policy, seed: int, env_config: EnvConfig, regime: Regime = Regime.MIXED,
                inference_history: Optional[int] = None, masked_inference: bool = False,
                sequence_length: int = 16, resample_prob: float = 0.1) -> EpisodeOutcome:
    "Roll the policy closed-loop on one episode, feeding it step by step through a PolicyRunner"
    runner = PolicyRunner(policy, _resolve_history(policy, inference_history))
    mask = InferenceMask(np.random.default_rng([seed, 1]), sequence_length, resample_prob) if masked_inference else None
    state = env_reset(seed, env_config, None, regime.occluded)

    done, success, masked_steps = False, False, 0
    while not done:
        hidden = mask.next() if mask is not None else False
        masked_steps += hidden
        action = runner.step(Observation(render(state, env_config), proprio_vector(state, env_config), hidden))
        state, done, success = env_step(state, action, env_config)
    return EpisodeOutcome(seed=seed, success=success, steps=state.step_index, masked_steps=masked_steps)


def evaluate_policy(policy: Policy, n_episodes: int, seed: int, inference_history: Optional[int] = None,
                    masked_inference: bool = False, env_config: Optional[EnvConfig] = None,
                    regime: Regime = Regime.MIXED, sequence_length: int = 16, resample_prob: float = 0.1,
                    workers: int = 1, progress: bool = False) -> float:
    "Fraction of successful episodes over env seeds seed .. seed + n_episodes - 1"
    env_config = env_config or EnvConfig()
    if policy.config.obs_grid != env_config.obs_shape or policy.config.n_joints != env_config.n_joints:
        raise DimensionError(f"Policy expects grids {policy.config.obs_grid} and {policy.config.n_joints} joints, "
                             f"the environment gives {env_config.obs_shape} and {env_config.n_joints}")
    if n_episodes < 1:
        raise UsageError(f"Evaluation needs at least one episode, got {n_episodes}")

    work = partial(run_episode, policy, env_config=env_config, regime=Regime(regime),
                   inference_history=inference_history, masked_inference=masked_inference,
                   sequence_length=sequence_length, resample_prob=resample_prob)
    seeds = [seed + index for index in range(n_episodes)]
    if workers <= 1:
        outcomes = list(tqdm(map(work, seeds), total=n_episodes, desc="eval", disable=not progress, leave=False))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(tqdm(pool.map(work, seeds, chunksize=8), total=n_episodes, desc="eval",
                                 disable=not progress, leave=False))
    return sum(outcome.success for outcome in outcomes) / n_episodes


def evaluation_seeds(base_seed: int, repetitions: int, eval_config: EvalConfig) -> List[int]:
    return [eval_config.seed_offset + base_seed + repetition * SEED_STRIDE for repetition in range(repetitions)]


def evaluate_seeds(policy: Policy, train_config: TrainConfig, eval_config: EvalConfig, env_config: EnvConfig,
                   base_seed: int, inference_history: Optional[int] = None,
                   masked_inference: Optional[bool] = None, progress: bool = False) -> EvalReport:
    """
    train_config.eval_episodes episodes on each of train_config.eval_seeds seed blocks.
    inference_history and masked_inference override eval_config when given.
    """
    history = eval_config.inference_history if inference_history is None else inference_history
    masked = eval_config.masked_inference if masked_inference is None else masked_inference
    seeds = evaluation_seeds(base_seed, train_config.eval_seeds, eval_config)
    rates = [evaluate_policy(policy, train_config.eval_episodes, seed, history, masked, env_config,
                             eval_config.regime, train_config.sequence_length, eval_config.mask_resample_prob,
                             eval_config.workers, progress)
             for seed in seeds]
    return EvalReport(per_seed=rates, seeds=seeds)
def make_validator(train_config: TrainConfig, eval_config: EvalConfig, env_config: EnvConfig,
                   base_seed: int) -> Optional[Validator]:
    """
    Per-epoch validation on the same seeds every epoch; None when validation is switched off.
    The seed blocks sit VALIDATION_SHIFT after those evaluate_seeds uses for the same base seed,
    so validation never sees a test episode.
    """
    if train_config.eval_episodes == 0 or train_config.eval_seeds == 0:
        return None
    if train_config.eval_episodes > VALIDATION_SHIFT:
        raise ConfigError(f"eval_episodes must be at most {VALIDATION_SHIFT} to keep validation and test "
                          f"episodes apart, got {train_config.eval_episodes}",
                          field="train.eval_episodes", bound=f"<= {VALIDATION_SHIFT}")

    def validate(policy: Policy, epoch: int) -> List[float]:
        return evaluate_seeds(policy, train_config, eval_config, env_config, base_seed + VALIDATION_SHIFT).per_seed

    return validate
