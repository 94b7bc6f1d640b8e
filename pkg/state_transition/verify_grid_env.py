from dataclasses import replace

import numpy as np
import pytest

from state_transition.errors import ConfigError
from state_transition.grid_env import (
    EnvConfig,
    NoiseConfig,
    NoiseSegment,
    decode_grid,
    end_effector,
    env_reset,
    env_step,
    expert_action,
    expert_reference,
    grid_cell,
    inject_noise_schedule,
    noisy_expert_action,
    proprio_vector,
    render,
)

CONFIG = EnvConfig()


def run_expert(seed: int, config: EnvConfig = CONFIG, noise: NoiseConfig = None, occluded: bool = None):
    state = env_reset(seed, config, noise, occluded)
    states, success, done = [state], False, False
    while not done:
        action, _ = noisy_expert_action(state, config)
        state, done, success = env_step(state, action, config)
        states.append(state)
    return states, success


class VerifyReset:
    def verify_same_seed_same_state(self) -> None:
        a, b = env_reset(5, CONFIG, NoiseConfig()), env_reset(5, CONFIG, NoiseConfig())
        assert np.array_equal(a.arm, b.arm)
        assert np.array_equal(a.object_pos, b.object_pos) and np.array_equal(a.goal_pos, b.goal_pos)
        assert np.array_equal(a.occlusion_schedule, b.occlusion_schedule)
        assert a.noise_segments == b.noise_segments and a.holding == b.holding

    def verify_object_and_goal_apart(self) -> None:
        for seed in range(300):
            state = env_reset(seed, CONFIG)
            assert not np.array_equal(state.object_pos, state.goal_pos)
            assert np.linalg.norm(state.object_pos - state.goal_pos) >= 3.0
            assert np.all((0 <= state.object_pos) & (state.object_pos < CONFIG.grid_size))

    def verify_object_positions_cover_interior(self) -> None:
        seen = {grid_cell(env_reset(seed, CONFIG).object_pos) for seed in range(1000)}
        interior = {(x, y) for x in range(1, CONFIG.grid_size - 1) for y in range(1, CONFIG.grid_size - 1)}
        assert len(seen & interior) >= 0.8 * len(interior)

    def verify_occlusion_override(self) -> None:
        state = env_reset(0, CONFIG, occluded=True)
        assert not state.occlusion_schedule[0] and state.occlusion_schedule[1:].all()
        assert not env_reset(0, CONFIG, occluded=False).occlusion_schedule.any()

    def verify_occlusion_rate(self) -> None:
        rate = np.mean([env_reset(seed, CONFIG).occluded for seed in range(1000)])
        assert abs(rate - 0.5) < 0.06

    def verify_config_ranges(self) -> None:
        with pytest.raises(ConfigError) as info:
            EnvConfig(occlusion_prob=1.5)
        assert info.value.field == "occlusion_prob"
        with pytest.raises(ConfigError):
            EnvConfig(n_joints=1)

    def verify_unreachable_separation_rejected(self) -> None:
        with pytest.raises(ConfigError) as info:
            EnvConfig(min_separation=25.0)
        assert info.value.field == "min_separation"
        # the largest separation every cell can still satisfy on a 16 grid
        state = env_reset(0, EnvConfig(min_separation=10.6))
        assert np.linalg.norm(state.object_pos - state.goal_pos) >= 10.6


class VerifyStep:
    def verify_zero_action_only_advances_time(self) -> None:
        state = env_reset(3, CONFIG)
        after, done, success = env_step(state, np.zeros(2), CONFIG)
        assert after.step_index == 1 and not done and not success
        assert np.array_equal(after.arm, state.arm) and np.array_equal(after.object_pos, state.object_pos)
        assert after.holding == state.holding

    def verify_displacement_bounded(self) -> None:
        rng = np.random.default_rng(0)
        state = env_reset(1, CONFIG)
        for _ in range(50):
            action = rng.normal(scale=5.0, size=2)
            action[rng.integers(2)] = rng.choice([np.nan, np.inf, -np.inf])
            after, _, _ = env_step(state, action, CONFIG)
            assert np.linalg.norm(end_effector(after.arm) - end_effector(state.arm)) <= np.sqrt(2) + 1e-12
            assert np.all((after.arm >= 0) & (after.arm <= CONFIG.grid_size - 1))
            state = after

    def verify_grasp_then_place(self) -> None:
        state = replace(env_reset(0, CONFIG), arm=np.array([2.0, 2.0]), object_pos=np.array([2.5, 2.0]),
                        goal_pos=np.array([2.0, 2.5]))
        state, done, success = env_step(state, np.zeros(2), CONFIG)
        assert state.holding and np.array_equal(state.object_pos, end_effector(state.arm))
        assert success and done

    def verify_horizon_ends_episode(self) -> None:
        state = env_reset(0, EnvConfig(horizon=3))
        for step in range(3):
            state, done, success = env_step(state, np.zeros(2), EnvConfig(horizon=3))
        assert done and not success


class VerifyExpert:
    def verify_zero_action_at_target(self) -> None:
        state = env_reset(2, CONFIG)
        target = end_effector(state.arm)
        assert np.array_equal(expert_action(state, target, CONFIG), np.zeros(2))

    def verify_moves_toward_perceived_target(self) -> None:
        state = replace(env_reset(2, CONFIG), arm=np.array([5.0, 5.0]))
        action = expert_action(state, np.array([7.0, 5.0]), CONFIG)
        assert action[0] > 0 and action[1] == 0

    def verify_heads_for_goal_once_holding(self) -> None:
        state = replace(env_reset(2, CONFIG), arm=np.array([5.0, 5.0]), holding=True, goal_pos=np.array([5.0, 9.0]))
        action = expert_action(state, np.array([0.0, 0.0]), CONFIG)
        assert action[0] == 0 and action[1] == CONFIG.max_delta

    def verify_extra_joints_share_axes(self) -> None:
        config = EnvConfig(n_joints=4)
        state = env_reset(0, config)
        action = expert_action(state, np.array([9.0, 3.0]), config)
        assert action[0] == action[2] and action[1] == action[3]

    def verify_succeeds_without_noise(self) -> None:
        successes = sum(run_expert(seed)[1] for seed in range(1000))
        assert successes >= 990

    def verify_path_length(self) -> None:
        for seed in range(100):
            states, success = run_expert(seed, occluded=False)
            first = states[0]
            l1 = np.abs(first.object_pos - end_effector(first.arm)).sum() + np.abs(first.goal_pos - first.object_pos).sum()
            assert success
            assert len(states) - 1 <= 2 * l1 + 4


class VerifyNoise:
    def verify_disabled_gives_no_segments(self) -> None:
        rng = np.random.default_rng(0)
        assert all(inject_noise_schedule(rng, 60, NoiseConfig(enabled=False)) == [] for _ in range(100))

    def verify_segment_ranges(self) -> None:
        rng = np.random.default_rng(1)
        for _ in range(2000):
            for segment in inject_noise_schedule(rng, 60, NoiseConfig()):
                assert 2 <= segment.start <= 30
                assert 3 <= segment.length <= 8
                assert 2.0 - 1e-12 <= np.hypot(*segment.offset) <= 4.0 + 1e-12

    def verify_noised_episode_fraction(self) -> None:
        fraction = np.mean([bool(env_reset(seed, CONFIG, NoiseConfig()).noise_segments) for seed in range(1000)])
        assert abs(fraction - 0.7) <= 0.05

    def verify_segments_start_inside_the_noise_free_episode(self) -> None:
        for seed in range(300):
            state = env_reset(seed, CONFIG, NoiseConfig())
            reference = expert_reference(replace(state, noise_segments=[]), CONFIG)
            for segment in state.noise_segments:
                assert 2 <= segment.start <= min(30, len(reference) - 1)
                assert 2.0 - 1e-12 <= np.hypot(*segment.offset) <= 4.0 + 1e-12

    def verify_first_noisy_step_moves_away(self) -> None:
        retreats = []
        for seed in range(300):
            states, _ = run_expert(seed, noise=NoiseConfig())
            if not states[0].noise_segments:
                continue
            start = states[0].noise_segments[0].start
            before, after = states[start], states[start + 1]
            target = before.goal_pos if before.holding else before.object_pos
            retreats.append(np.linalg.norm(end_effector(after.arm) - target)
                            > np.linalg.norm(end_effector(before.arm) - target))
        assert len(retreats) > 150
        assert np.mean(retreats) >= 0.9

    def verify_noise_perturbs_current_target(self) -> None:
        state = replace(env_reset(0, CONFIG), arm=np.array([4.0, 4.0]), object_pos=np.array([5.0, 4.0]),
                        noise_segments=[NoiseSegment(start=0, length=3, offset=(-3.0, 0.0))])
        action, noisy = noisy_expert_action(state, CONFIG)
        assert noisy
        assert np.array_equal(action, expert_action(state, np.array([2.0, 4.0]), CONFIG))

    def verify_detour_and_recovery(self) -> None:
        state = replace(env_reset(0, CONFIG, occluded=False), arm=np.array([4.0, 4.0]), object_pos=np.array([6.0, 4.0]),
                        goal_pos=np.array([10.0, 10.0]), noise_segments=[NoiseSegment(start=0, length=4, offset=(-4.0, 0.0))])
        distances, done, success = [], False, False
        while not done:
            distances.append(np.linalg.norm(end_effector(state.arm) - state.object_pos) if not state.holding else None)
            action, _ = noisy_expert_action(state, CONFIG)
            state, done, success = env_step(state, action, CONFIG)
        assert distances[1] > distances[0]
        assert success


class VerifyRender:
    def verify_grid_reconstructs_positions(self) -> None:
        states, _ = run_expert(4, occluded=False)
        for state in states:
            if state.holding:
                continue
            cells = decode_grid(render(state, CONFIG))
            assert cells["object"] == [grid_cell(state.object_pos)]
            assert cells["goal"] == [grid_cell(state.goal_pos)]
            assert cells["arm"] == [grid_cell(end_effector(state.arm))]

    def verify_occluded_object_hidden_after_first_step(self) -> None:
        states, _ = run_expert(4, occluded=True)
        assert decode_grid(render(states[0], CONFIG))["object"] != []
        assert all(decode_grid(render(s, CONFIG))["object"] == [] for s in states[1:])

    def verify_proprio_layout(self) -> None:
        state = replace(env_reset(0, CONFIG), arm=np.array([15.0, 0.0]), holding=True)
        assert np.array_equal(proprio_vector(state, CONFIG), np.array([1.0, 0.0, 1.0]))
