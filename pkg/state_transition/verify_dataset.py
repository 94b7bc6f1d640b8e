import json
from pathlib import Path

import numpy as np
import pytest

from state_transition.dataset import (
    MANIFEST_FILE,
    OBSERVATIONS_FILE,
    RECORDS_FILE,
    Episode,
    generate_dataset,
    load_dataset,
    rollout_expert,
)
from state_transition.errors import DatasetError
from state_transition.grid_env import EnvConfig, NoiseConfig, env_reset, env_step, expert_action


def dataset_bytes(path: Path) -> dict:
    return {name: (path / name).read_bytes() for name in (RECORDS_FILE, OBSERVATIONS_FILE, MANIFEST_FILE)}


class VerifyGeneration:
    def verify_empty_dataset(self, tmp_path: Path) -> None:
        generate_dataset(tmp_path, 0, noise_on=True, seed=0)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 0
        assert loaded.manifest["n_episodes"] == 0 and loaded.manifest["format_version"] == 1

    def verify_same_seed_same_bytes(self, tmp_path: Path) -> None:
        generate_dataset(tmp_path / "a", 12, noise_on=True, seed=7)
        generate_dataset(tmp_path / "b", 12, noise_on=True, seed=7)
        assert dataset_bytes(tmp_path / "a") == dataset_bytes(tmp_path / "b")

    def verify_workers_do_not_change_bytes(self, tmp_path: Path) -> None:
        generate_dataset(tmp_path / "serial", 10, noise_on=True, seed=3)
        generate_dataset(tmp_path / "parallel", 10, noise_on=True, seed=3, workers=2)
        assert dataset_bytes(tmp_path / "serial") == dataset_bytes(tmp_path / "parallel")

    def verify_round_trip(self, tmp_path: Path) -> None:
        generated = generate_dataset(tmp_path, 6, noise_on=True, seed=1)
        loaded = load_dataset(tmp_path)
        assert loaded.manifest == generated.manifest
        for a, b in zip(generated.episodes, loaded.episodes):
            assert np.array_equal(a.obs, b.obs) and np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.proprio, b.proprio) and np.array_equal(a.noise_active, b.noise_active)
            assert a.noise_segments == b.noise_segments and a.seed == b.seed

    def verify_only_successful_episodes(self, tmp_path: Path) -> None:
        dataset = generate_dataset(tmp_path, 20, noise_on=True, seed=0, env_config=EnvConfig(horizon=25))
        assert all(episode.success for episode in dataset.episodes)
        assert dataset.manifest["n_episodes"] + dataset.manifest["n_failed"] == 20

    def verify_noise_off_has_no_flags(self, tmp_path: Path) -> None:
        dataset = generate_dataset(tmp_path, 10, noise_on=False, seed=0)
        assert not any(e.noise_active.any() or e.noise_segments for e in dataset.episodes)
        assert dataset.manifest["settings"]["noise"]["enabled"] is False

    def verify_steps_view(self) -> None:
        episode = rollout_expert(0, EnvConfig())
        steps = episode.steps
        assert len(steps) == len(episode)
        assert np.array_equal(steps[3].expert_action, episode.actions[3])
        assert steps[-1].success_so_far and not steps[0].success_so_far


class VerifyNoiseLabels:
    def verify_flags_mark_exactly_the_noised_steps(self) -> None:
        config, noise = EnvConfig(), NoiseConfig()
        checked = 0
        for seed in range(40):
            episode = rollout_expert(seed, config, noise)
            expected = np.zeros(len(episode), dtype=bool)
            for segment in episode.noise_segments:
                expected[segment.start:segment.start + segment.length] = True
            assert np.array_equal(episode.noise_active, expected)
            checked += episode.noise_active.any()
        assert checked > 0

    def verify_noised_actions_follow_corrupted_perception(self) -> None:
        config, noise = EnvConfig(), NoiseConfig()
        for seed in range(40):
            episode = rollout_expert(seed, config, noise)
            state = env_reset(seed, config, noise)
            for t in range(len(episode)):
                offset = np.zeros(2)
                if episode.noise_active[t]:
                    offset = np.array(episode.noise_segments[0].offset)
                if state.holding:
                    expected = expert_action(state, state.object_pos, config, perceived_goal_pos=state.goal_pos + offset)
                else:
                    expected = expert_action(state, state.object_pos + offset, config)
                assert np.array_equal(episode.actions[t], expected)
                state, _, _ = env_step(state, episode.actions[t], config)

    def verify_recovery_rich_episodes_detour(self) -> None:
        config, noise = EnvConfig(), NoiseConfig()
        episodes = [rollout_expert(seed, config, noise) for seed in range(1000)]
        kept = [episode for episode in episodes if episode.success]
        assert len(kept) >= 990
        assert np.mean([episode.has_detour() for episode in kept]) >= 0.60

    def verify_detour_detection(self) -> None:
        proprio = np.zeros((4, 3))
        episode = Episode(obs=np.zeros((4, 1, 16, 16)), proprio=proprio, actions=np.zeros((4, 2)),
                          noise_active=np.zeros(4, dtype=bool), success_so_far=np.zeros(4, dtype=bool),
                          success=True, seed=0, target_distance=np.array([3.0, 2.0, 1.0, 0.5]))
        assert not episode.has_detour()
        episode.target_distance = np.array([3.0, 3.5, 1.0, 0.5])
        assert episode.has_detour()
        # A jump across the grasp (target switches to the goal) is not a detour
        episode.target_distance = np.array([3.0, 0.5, 6.0, 5.0])
        episode.proprio[2:, -1] = 1.0
        assert not episode.has_detour()


class VerifyLoadErrors:
    def verify_truncated_observations(self, tmp_path: Path) -> None:
        generate_dataset(tmp_path, 3, noise_on=True, seed=0)
        sidecar = tmp_path / OBSERVATIONS_FILE
        sidecar.write_bytes(sidecar.read_bytes()[:-8])
        with pytest.raises(DatasetError, match=OBSERVATIONS_FILE):
            load_dataset(tmp_path)

    def verify_unknown_version(self, tmp_path: Path) -> None:
        generate_dataset(tmp_path, 1, noise_on=True, seed=0)
        manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
        manifest["format_version"] = 42
        (tmp_path / MANIFEST_FILE).write_text(json.dumps(manifest))
        with pytest.raises(DatasetError, match="format_version"):
            load_dataset(tmp_path)

    def verify_missing_directory(self, tmp_path: Path) -> None:
        with pytest.raises(DatasetError, match="Could not read"):
            load_dataset(tmp_path / "nowhere")

    def verify_unwritable_destination(self, tmp_path: Path) -> None:
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(DatasetError, match="Could not write"):
            generate_dataset(blocker / "sub", 1, noise_on=False, seed=0)
