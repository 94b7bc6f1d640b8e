import numpy as np
import pytest

from state_transition.errors import ConfigError, DimensionError, UsageError
from state_transition.evaluation import (
    VALIDATION_SHIFT,
    EvalConfig,
    InferenceMask,
    Regime,
    evaluate_policy,
    evaluate_seeds,
    evaluation_seeds,
    make_validator,
    run_episode,
)
from state_transition.grid_env import EnvConfig
from state_transition.policy import Policy, PolicyConfig, Variant
from state_transition.training import TrainConfig
from state_transition.verify_policy import random_policy

SMALL_ENV = EnvConfig(grid_size=8, horizon=20)


def small_config(variant: Variant = Variant.STA, **overrides) -> PolicyConfig:
    settings = dict(variant=variant, n_layers=1, d_model=16, n_heads=2, k_max=3, obs_grid=SMALL_ENV.obs_shape,
                    proprio_dim=SMALL_ENV.proprio_dim, conv_channels=(2, 4), head_hidden=8)
    settings.update(overrides)
    return PolicyConfig(**settings)


class VerifyInferenceMask:
    def verify_first_step_shown(self) -> None:
        for seed in range(50):
            assert not InferenceMask(np.random.default_rng(seed), 16, 1.0).next()

    def verify_runs_leave_a_visible_step(self) -> None:
        mask = InferenceMask(np.random.default_rng(0), 16, 0.5)
        flags = [mask.next() for _ in range(5000)]
        assert any(flags)
        run = longest = 0
        for hidden in flags:
            run = run + 1 if hidden else 0
            longest = max(longest, run)
        assert longest <= 15

    def verify_run_lengths_cover_range(self) -> None:
        mask = InferenceMask(np.random.default_rng(1), 8, 1.0)
        flags = [mask.next() for _ in range(20000)]
        runs, run = [], 0
        for hidden in flags:
            if hidden:
                run += 1
            elif run:
                runs.append(run)
                run = 0
        assert set(runs) == set(range(1, 8))

    def verify_no_resampling_never_masks(self) -> None:
        mask = InferenceMask(np.random.default_rng(2), 16, 0.0)
        assert not any(mask.next() for _ in range(500))


class VerifyEvalConfig:
    def verify_ranges(self) -> None:
        with pytest.raises(ConfigError):
            EvalConfig(mask_resample_prob=1.5)
        with pytest.raises(ConfigError):
            EvalConfig(inference_history=-1)
        assert EvalConfig(regime="occluded").regime == Regime.OCCLUDED

    def verify_seed_blocks_distinct(self) -> None:
        seeds = evaluation_seeds(3, 3, EvalConfig())
        assert len(set(seeds)) == 3 and min(seeds) >= 1_000_000


class VerifyEvaluatePolicy:
    def verify_untrained_policy_fails(self) -> None:
        policy = Policy.initialize(small_config(), seed=0)
        assert evaluate_policy(policy, 20, seed=0, env_config=SMALL_ENV) < 0.05

    def verify_same_seed_same_rate(self) -> None:
        policy = random_policy(small_config(), seed=1, std=0.3)
        first = evaluate_policy(policy, 10, seed=5, env_config=SMALL_ENV, masked_inference=True)
        assert first == evaluate_policy(policy, 10, seed=5, env_config=SMALL_ENV, masked_inference=True)

    def verify_workers_do_not_change_rate(self) -> None:
        policy = random_policy(small_config(), seed=2, std=0.3)
        serial = evaluate_policy(policy, 8, seed=0, env_config=SMALL_ENV)
        assert serial == evaluate_policy(policy, 8, seed=0, env_config=SMALL_ENV, workers=2)

    def verify_no_history_ignores_inference_history(self) -> None:
        policy = random_policy(small_config(Variant.NO_HISTORY), seed=3, std=0.3)
        outcomes = [[run_episode(policy, seed, SMALL_ENV, inference_history=history) for seed in range(6)]
                    for history in (0, 3, 15)]
        assert outcomes[0] == outcomes[1] == outcomes[2]

    def verify_history_beyond_window_clamped(self) -> None:
        policy = random_policy(small_config(), seed=4, std=0.3)
        assert run_episode(policy, 0, SMALL_ENV, inference_history=10) == run_episode(policy, 0, SMALL_ENV)
        with pytest.raises(UsageError):
            run_episode(policy, 0, SMALL_ENV, inference_history=-1)

    def verify_masked_inference_hides_steps(self) -> None:
        policy = Policy.initialize(small_config(), seed=0)
        outcomes = [run_episode(policy, seed, SMALL_ENV, masked_inference=True) for seed in range(10)]
        assert sum(o.masked_steps for o in outcomes) > 0
        assert all(o.masked_steps < o.steps for o in outcomes)
        assert all(run_episode(policy, seed, SMALL_ENV).masked_steps == 0 for seed in range(3))

    def verify_environment_mismatch(self) -> None:
        policy = Policy.initialize(small_config(), seed=0)
        with pytest.raises(DimensionError):
            evaluate_policy(policy, 1, seed=0, env_config=EnvConfig())

    def verify_needs_an_episode(self) -> None:
        with pytest.raises(UsageError):
            evaluate_policy(Policy.initialize(small_config(), seed=0), 0, seed=0, env_config=SMALL_ENV)


class VerifySeedAveraging:
    def verify_report_per_seed(self) -> None:
        policy = random_policy(small_config(), seed=5, std=0.3)
        train_config = TrainConfig(eval_episodes=4, eval_seeds=3)
        report = evaluate_seeds(policy, train_config, EvalConfig(), SMALL_ENV, base_seed=0)
        assert len(report.per_seed) == 3 and len(report.seeds) == 3
        assert report.mean == pytest.approx(np.mean(report.per_seed))
        assert report.per_seed[1] == evaluate_policy(policy, 4, report.seeds[1], env_config=SMALL_ENV)

    def verify_validator_switch(self) -> None:
        assert make_validator(TrainConfig(eval_episodes=0), EvalConfig(), SMALL_ENV, 0) is None
        validator = make_validator(TrainConfig(eval_episodes=2, eval_seeds=2), EvalConfig(), SMALL_ENV, 0)
        rates = validator(Policy.initialize(small_config(), seed=0), 1)
        assert len(rates) == 2 and all(0.0 <= r <= 1.0 for r in rates)

    def verify_validation_never_sees_test_episodes(self) -> None:
        policy = random_policy(small_config(), seed=5, std=0.3)
        validator = make_validator(TrainConfig(eval_episodes=3, eval_seeds=2), EvalConfig(), SMALL_ENV, 7)
        validation_starts = evaluation_seeds(7 + VALIDATION_SHIFT, 2, EvalConfig())
        assert validator(policy, 1) == [evaluate_policy(policy, 3, seed, env_config=SMALL_ENV)
                                        for seed in validation_starts]

        test_episodes = {seed + i for seed in evaluation_seeds(7, 3, EvalConfig()) for i in range(100)}
        validation_episodes = {seed + i for seed in evaluation_seeds(7 + VALIDATION_SHIFT, 3, EvalConfig())
                               for i in range(100)}
        assert not test_episodes & validation_episodes

    def verify_validation_block_size_bounded(self) -> None:
        with pytest.raises(ConfigError) as info:
            make_validator(TrainConfig(eval_episodes=VALIDATION_SHIFT + 1), EvalConfig(), SMALL_ENV, 0)
        assert info.value.field == "train.eval_episodes"
