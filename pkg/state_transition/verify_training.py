import logging
from pathlib import Path
from typing import List

import numpy as np
import pytest
from scipy.stats import chisquare

from shared_utils import read_jsonl
from state_transition.checkpoint import load_checkpoint
from state_transition.dataset import Dataset, Episode, rollout_expert
from state_transition.errors import ConfigError, DivergenceError, UsageError
from state_transition.grid_env import EnvConfig, NoiseConfig
from state_transition.policy import Observation, Policy, PolicyConfig, forward_policy, forward_sequence
from state_transition.tensor import Tensor
from state_transition.training import (
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    METRICS_FILE,
    TrainConfig,
    TrainingSequence,
    apply_temporal_mask,
    compute_loss,
    masked_mse,
    sample_training_sequences,
    train,
)
from state_transition.verify_policy import micro_config, random_observations, random_policy

SMALL_ENV = EnvConfig(grid_size=8, horizon=30)


def small_dataset(n_episodes: int, seed: int = 0, noise: NoiseConfig = NoiseConfig()) -> Dataset:
    episodes = [rollout_expert(seed + i, SMALL_ENV, noise) for i in range(n_episodes)]
    return Dataset([e for e in episodes if e.success], {"content_hash": f"in-memory-{seed}"})


def small_policy_config(**overrides) -> PolicyConfig:
    settings = dict(n_layers=2, d_model=32, n_heads=2, k_max=7, obs_grid=SMALL_ENV.obs_shape,
                    proprio_dim=SMALL_ENV.proprio_dim, conv_channels=(2, 4), head_hidden=16)
    settings.update(overrides)
    return PolicyConfig(**settings)


def flat_episode(length: int) -> Episode:
    steps = np.arange(length, dtype=float)
    return Episode(obs=np.broadcast_to(steps[:, None, None, None], (length, 1, 8, 8)).copy(),
                   proprio=np.zeros((length, 3)), actions=np.tile(steps[:, None], (1, 2)),
                   noise_active=np.zeros(length, dtype=bool), success_so_far=np.zeros(length, dtype=bool),
                   success=True, seed=0)


def sequence_from(observations: List[Observation], actions: np.ndarray, loss_mask: List[bool]) -> TrainingSequence:
    return TrainingSequence(obs=np.stack([o.obs_grid for o in observations]),
                            proprio=np.stack([o.proprio for o in observations]), actions=actions,
                            loss_mask=np.array(loss_mask), visual_masked=np.array([o.visual_masked for o in observations]),
                            episode=0, start=0)


class VerifyTrainConfig:
    def verify_masking_needs_room_for_a_span(self) -> None:
        with pytest.raises(ConfigError) as info:
            TrainConfig(sequence_length=1)
        assert info.value.field == "sequence_length"
        TrainConfig(sequence_length=1, mask_enabled=False)

    def verify_positive_learning_rate(self) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)


class VerifySampling:
    def verify_start_offsets_uniform(self) -> None:
        dataset = Dataset([flat_episode(25)], {})
        config = TrainConfig(sequence_length=16, batch_size=5000, mask_enabled=False)
        pvalues = []
        for seed in range(5):
            starts = [s.start for s in sample_training_sequences(dataset, np.random.default_rng(seed), config)]
            counts = np.bincount(starts, minlength=10)
            assert len(counts) == 10
            pvalues.append(chisquare(counts).pvalue)
        assert np.median(pvalues) > 0.01

    def verify_consecutive_steps(self) -> None:
        dataset = Dataset([flat_episode(25)], {})
        config = TrainConfig(sequence_length=16, batch_size=20, mask_enabled=False)
        for sequence in sample_training_sequences(dataset, np.random.default_rng(1), config):
            assert np.array_equal(sequence.actions[:, 0], np.arange(sequence.start, sequence.start + 16))
            assert sequence.loss_mask.all()

    def verify_short_episodes_front_padded(self) -> None:
        dataset = Dataset([flat_episode(5)], {})
        config = TrainConfig(sequence_length=8, batch_size=3, mask_enabled=False)
        for sequence in sample_training_sequences(dataset, np.random.default_rng(2), config):
            assert sequence.padded == 3
            assert not sequence.loss_mask[:3].any() and sequence.loss_mask[3:].all()
            assert np.array_equal(sequence.obs[:3], np.zeros((3, 1, 8, 8)))
            assert np.array_equal(sequence.actions[3:, 0], np.arange(5))

    def verify_noised_steps_excluded(self) -> None:
        episode = flat_episode(10)
        episode.noise_active[4:7] = True
        config = TrainConfig(sequence_length=10, batch_size=2, mask_enabled=False)
        for sequence in sample_training_sequences(Dataset([episode], {}), np.random.default_rng(3), config):
            assert np.array_equal(sequence.loss_mask, ~episode.noise_active)

    def verify_empty_dataset(self) -> None:
        with pytest.raises(UsageError):
            sample_training_sequences(Dataset([], {}), np.random.default_rng(0), TrainConfig())


class VerifyTemporalMask:
    def verify_span_census(self) -> None:
        rng = np.random.default_rng(0)
        config = TrainConfig(sequence_length=16)
        base = sample_training_sequences(Dataset([flat_episode(16)], {}), rng, replace_batch(config, 1))[0]
        pvalues = []
        for _ in range(5):
            spans = []
            for _ in range(7000):
                masked = apply_temporal_mask(base, rng, config)
                start, span = masked.mask_span
                assert 2 <= span <= 8 and 1 <= start <= 16 - span
                assert not masked.visual_masked[0]
                assert masked.visual_masked.sum() == span
                assert masked.visual_masked[start:start + span].all()
                spans.append(span)
            counts = np.bincount(spans)[2:]
            assert len(counts) == 7
            pvalues.append(chisquare(counts).pvalue)
        assert np.median(pvalues) > 0.01

    @pytest.mark.parametrize("length", [4, 5, 9, 16])
    def verify_every_later_step_gets_masked(self, length: int) -> None:
        rng = np.random.default_rng(length)
        config = TrainConfig(sequence_length=length)
        base = sample_training_sequences(Dataset([flat_episode(length)], {}), rng, replace_batch(config, 1))[0]
        times_masked = np.zeros(length, dtype=int)
        for _ in range(2000):
            times_masked += apply_temporal_mask(base, rng, config).visual_masked
        assert times_masked[0] == 0
        assert np.all(times_masked[1:] > 0)

    def verify_shortest_masked_sequence(self) -> None:
        rng = np.random.default_rng(1)
        config = TrainConfig(sequence_length=4)
        base = sample_training_sequences(Dataset([flat_episode(4)], {}), rng, replace_batch(config, 1))[0]
        for _ in range(50):
            start, span = apply_temporal_mask(base, rng, config).mask_span
            assert span == 2 and start in (1, 2)

    def verify_original_left_untouched(self) -> None:
        rng = np.random.default_rng(2)
        config = TrainConfig(sequence_length=8)
        base = sample_training_sequences(Dataset([flat_episode(8)], {}), rng, replace_batch(config, 1))[0]
        apply_temporal_mask(base, rng, config)
        assert not base.visual_masked.any() and base.mask_span is None


def replace_batch(config: TrainConfig, batch_size: int) -> TrainConfig:
    return TrainConfig(sequence_length=config.sequence_length, batch_size=batch_size, mask_enabled=config.mask_enabled)


class VerifyLoss:
    def verify_constant_offset(self) -> None:
        rng = np.random.default_rng(0)
        predictions = rng.normal(size=(3, 5, 2))
        loss_mask = rng.random((3, 5)) < 0.6
        loss_mask[0, 0] = True
        loss = masked_mse(Tensor(predictions), predictions + 0.25, loss_mask)
        assert loss.item() == pytest.approx(0.0625, rel=1e-12)

    def verify_excluded_targets_ignored(self) -> None:
        rng = np.random.default_rng(1)
        predictions = Tensor(rng.normal(size=(2, 6, 2)))
        targets = rng.normal(size=(2, 6, 2))
        loss_mask = np.ones((2, 6), dtype=bool)
        loss_mask[0, 2:4] = loss_mask[1, 5] = False
        garbage = targets.copy()
        garbage[~loss_mask] = rng.choice([np.nan, np.inf, 1e300], size=(int((~loss_mask).sum()), 2))
        assert masked_mse(predictions, garbage, loss_mask).item() == masked_mse(predictions, targets, loss_mask).item()

    def verify_all_steps_excluded(self, caplog) -> None:
        with caplog.at_level(logging.WARNING):
            loss = masked_mse(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3, 2)), np.zeros((1, 3), dtype=bool))
        assert loss.item() == 0.0
        assert "excluded from the loss" in caplog.text

    def verify_matches_per_step_oracle(self) -> None:
        config = micro_config()
        policy = random_policy(config, seed=4, std=0.2)
        rng = np.random.default_rng(5)
        batch = []
        for b, loss_mask in enumerate(([False, True, True, False], [True, True, False, True])):
            observations = random_observations(config, 4, seed=10 + b, masked_every=3)
            batch.append(sequence_from(observations, rng.normal(size=(4, 2)), loss_mask))
        loss = compute_loss(batch, policy, TrainConfig(sequence_length=4, mask_enabled=False))

        total, kept = 0.0, 0
        for sequence in batch:
            observations = [Observation(sequence.obs[t], sequence.proprio[t], bool(sequence.visual_masked[t]))
                            for t in range(4)]
            for t in range(4):
                if sequence.loss_mask[t]:
                    prediction = forward_policy(policy, observations[:t + 1])
                    total += float(np.sum((prediction - sequence.actions[t]) ** 2))
                    kept += 1
        assert abs(loss.item() - total / (kept * config.n_joints)) < 1e-12

    def verify_future_steps_do_not_reach_the_loss(self) -> None:
        config = micro_config()
        policy = random_policy(config, seed=6, std=0.2)
        observations = random_observations(config, 4, seed=7)
        actions = np.random.default_rng(8).normal(size=(4, 2))
        before = compute_loss([sequence_from(observations, actions, [False, True, False, False])], policy,
                              TrainConfig(sequence_length=4, mask_enabled=False)).item()
        observations[3] = Observation(observations[3].obs_grid + 5.0, observations[3].proprio * 3.0, True)
        observations[2] = Observation(observations[2].obs_grid * 0.0, observations[2].proprio, False)
        after = compute_loss([sequence_from(observations, actions, [False, True, False, False])], policy,
                             TrainConfig(sequence_length=4, mask_enabled=False)).item()
        assert abs(before - after) < 1e-12


class VerifyTrain:
    def verify_loss_decreases(self) -> None:
        dataset = small_dataset(20)
        policy = Policy.initialize(small_policy_config(), seed=0)
        config = TrainConfig(sequence_length=8, batch_size=16, learning_rate=1e-2, epochs=2, batches_per_epoch=20)
        result = train(policy, dataset, config, seed=0)
        assert [r.epoch for r in result.history] == [1, 2]
        assert result.history[1].train_loss < result.history[0].train_loss

    def verify_parameters_change(self) -> None:
        dataset = small_dataset(5)
        policy = Policy.initialize(small_policy_config(), seed=1)
        before = {name: value.copy() for name, value in policy.arrays().items()}
        train(policy, dataset, TrainConfig(sequence_length=8, batch_size=4, epochs=1, batches_per_epoch=2), seed=0)
        assert any(not np.array_equal(before[name], value) for name, value in policy.arrays().items())
        assert all(tensor.grad is None for tensor in policy.params.values())

    def verify_metrics_deterministic(self, tmp_path: Path) -> None:
        dataset = small_dataset(6)
        config = TrainConfig(sequence_length=8, batch_size=4, epochs=2, batches_per_epoch=2)
        for name in ("a", "b"):
            policy = Policy.initialize(small_policy_config(), seed=2)
            train(policy, dataset, config, seed=3, out_dir=tmp_path / name, validator=lambda p, epoch: [0.5, 0.25])
        first = (tmp_path / "a" / METRICS_FILE).read_bytes()
        assert first == (tmp_path / "b" / METRICS_FILE).read_bytes()
        records = read_jsonl(tmp_path / "a" / METRICS_FILE)
        assert [r["epoch"] for r in records] == [1, 2]
        assert records[0]["eval_success"] == 0.375 and records[0]["eval_success_per_seed"] == [0.5, 0.25]

    def verify_best_epoch_ties_go_to_earliest(self, tmp_path: Path) -> None:
        dataset = small_dataset(6)
        rates = {1: [0.5], 2: [0.7], 3: [0.7]}
        policy = Policy.initialize(small_policy_config(), seed=2)
        result = train(policy, dataset, TrainConfig(sequence_length=8, batch_size=4, epochs=3, batches_per_epoch=1),
                       seed=0, out_dir=tmp_path, validator=lambda p, epoch: rates[epoch])
        assert result.best_epoch == 2 and result.best_success == 0.7
        assert load_checkpoint(tmp_path / BEST_CHECKPOINT).metadata["epoch"] == 2
        last = load_checkpoint(tmp_path / LAST_CHECKPOINT)
        assert last.metadata["epoch"] == 3 and last.optimizer.step_count == 3

    def verify_best_checkpoint_without_validation_is_last_epoch(self, tmp_path: Path) -> None:
        dataset = small_dataset(6)
        policy = Policy.initialize(small_policy_config(), seed=3)
        result = train(policy, dataset, TrainConfig(sequence_length=8, batch_size=4, epochs=3, batches_per_epoch=1),
                       seed=0, out_dir=tmp_path)
        assert result.best_epoch == 3 and result.best_success is None
        best = load_checkpoint(tmp_path / BEST_CHECKPOINT)
        assert best.metadata["epoch"] == result.best_epoch
        assert all(np.array_equal(best.params[name], value) for name, value in policy.arrays().items())

    def verify_best_checkpoint_holds_best_weights(self, tmp_path: Path) -> None:
        dataset = small_dataset(6)
        rates = {1: [0.9], 2: [0.1]}
        policy = Policy.initialize(small_policy_config(), seed=4)
        snapshots = {}

        def validator(p: Policy, epoch: int) -> List[float]:
            snapshots[epoch] = {name: value.copy() for name, value in p.arrays().items()}
            return rates[epoch]

        train(policy, dataset, TrainConfig(sequence_length=8, batch_size=4, epochs=2, batches_per_epoch=1),
              seed=0, out_dir=tmp_path, validator=validator)
        best = load_checkpoint(tmp_path / BEST_CHECKPOINT)
        assert all(np.array_equal(best.params[name], snapshots[1][name]) for name in best.params)

    def verify_divergence_reported(self) -> None:
        dataset = small_dataset(4)
        policy = Policy.initialize(small_policy_config(), seed=0)
        policy.params["head.b2"].data[:] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(policy, dataset, TrainConfig(sequence_length=8, batch_size=2, epochs=1, batches_per_epoch=1), seed=0)
        assert info.value.epoch == 1 and info.value.batch == 0

    def verify_empty_dataset(self) -> None:
        policy = Policy.initialize(small_policy_config(), seed=0)
        with pytest.raises(UsageError):
            train(policy, Dataset([], {}), TrainConfig(), seed=0)

    def verify_trained_sequences_respect_causality(self) -> None:
        config = small_policy_config()
        policy = Policy.initialize(config, seed=5)
        dataset = small_dataset(4)
        train(policy, dataset, TrainConfig(sequence_length=8, batch_size=4, epochs=1, batches_per_epoch=3,
                                           learning_rate=1e-2), seed=0)
        episode = dataset.episodes[0]
        steps = min(len(episode), 6)
        full = forward_sequence(policy, episode.obs[None, :steps], episode.proprio[None, :steps],
                                np.zeros((1, steps), dtype=bool)).data
        prefix = forward_sequence(policy, episode.obs[None, :3], episode.proprio[None, :3],
                                  np.zeros((1, 3), dtype=bool)).data
        assert np.max(np.abs(full[0, :3] - prefix[0])) < 1e-12
