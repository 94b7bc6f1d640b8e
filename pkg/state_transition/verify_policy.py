import math
from typing import Dict, List

import numpy as np
import pytest

from state_transition import tensor as T
from state_transition.errors import ConfigError, DimensionError, SequencingError, UsageError
from state_transition.gradcheck import central_difference_gradient, relative_error
from state_transition.policy import (
    Observation,
    Policy,
    PolicyConfig,
    PolicyRunner,
    Variant,
    decoder_block,
    encode_state,
    forward_policy,
    forward_sequence,
    init_input_tokens,
    parameter_shapes,
)
from state_transition.attention import sequence_plan
from state_transition.tensor import ComputationTape, Tensor


def micro_config(variant: Variant = Variant.STA, **overrides) -> PolicyConfig:
    settings = dict(variant=variant, n_layers=2, d_model=8, n_heads=2, n_joints=2, n_state_tokens=2, k_max=3,
                    obs_grid=(1, 6, 6), proprio_dim=3, conv_channels=(2, 3), head_hidden=4, action_scale=50.0)
    settings.update(overrides)
    return PolicyConfig(**settings)


def random_policy(config: PolicyConfig, seed: int = 0, std: float = 0.3) -> Policy:
    "Every parameter drawn at random, so no sublayer is the identity"
    rng = np.random.default_rng(seed)
    arrays = {name: rng.normal(0.0, std, size=shape) for name, shape in parameter_shapes(config).items()}
    for name in arrays:
        if name.endswith("norm"):
            arrays[name] += 1.0
    return Policy.from_arrays(config, arrays)


def random_observations(config: PolicyConfig, steps: int, seed: int = 1, masked_every: int = 0) -> List[Observation]:
    rng = np.random.default_rng(seed)
    return [Observation(obs_grid=rng.integers(0, 4, size=config.obs_grid).astype(float),
                        proprio=rng.normal(size=config.proprio_dim),
                        visual_masked=bool(masked_every and t % masked_every == masked_every - 1))
            for t in range(steps)]


def stacked(observations: List[Observation]):
    return (np.stack([o.obs_grid for o in observations])[None],
            np.stack([o.proprio for o in observations])[None],
            np.array([[o.visual_masked for o in observations]]))


# Straight-line numpy forward pass, one step and one head at a time

def ref_gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x ** 2, axis=-1, keepdims=True) + 1e-6) * gain


def ref_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    _, h, width = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], -(-h // stride), -(-width // stride)))
    for o in range(out.shape[0]):
        for y in range(out.shape[1]):
            for z in range(out.shape[2]):
                patch = padded[:, y * stride:y * stride + 3, z * stride:z * stride + 3]
                out[o, y, z] = np.sum(patch * w[o]) + b[o, 0, 0]
    return out


def ref_forward(a: Dict[str, np.ndarray], config: PolicyConfig, history: List[Observation]) -> np.ndarray:
    d, m, heads = config.d_model, config.n_joints, config.n_heads
    dh = d // heads
    states, tokens = [], []
    for step in history:
        hidden = ref_gelu(ref_conv(step.obs_grid, a["encoder.conv1.weight"], a["encoder.conv1.bias"], 2))
        hidden = ref_gelu(ref_conv(hidden, a["encoder.conv2.weight"], a["encoder.conv2.bias"], 2))
        visual = (hidden.reshape(-1) @ a["encoder.visual.weight"] + a["encoder.visual.bias"]).reshape(-1, d)
        if step.visual_masked:
            visual = a["encoder.mask_embedding"]
        proprio = ref_gelu(step.proprio @ a["encoder.proprio1.weight"] + a["encoder.proprio1.bias"])
        proprio = proprio @ a["encoder.proprio2.weight"] + a["encoder.proprio2.bias"]
        states.append(np.vstack([visual, proprio]))
        tokens.append(step.proprio[:m, None] * a["input.joint_weight"]
                      + (step.proprio @ a["input.context.weight"] + a["input.context.bias"])
                      + a["input.joint_position"])

    steps = len(history)
    for layer in range(config.n_layers):
        p = {name[len(f"layers.{layer}."):]: value for name, value in a.items() if name.startswith(f"layers.{layer}.")}
        after_cross = []
        for t in range(steps):
            window = range(max(0, t - config.k_max), t + 1)
            k = t - window[0]
            head_outputs = []
            for h in range(heads):
                cols = slice(h * dh, (h + 1) * dh)
                pos = p["cross.position"][h]
                q_t = ref_rmsnorm(tokens[t], p["cross_norm"]) @ p["cross.q"][:, cols]
                if config.variant == Variant.STANDARD_XATTN:
                    keys = np.vstack([states[tau] @ p["cross.k"][:, cols] + pos[t - tau] for tau in window])
                    values = np.vstack([states[tau] @ p["cross.v"][:, cols] for tau in window])
                    head_outputs.append(ref_softmax(q_t @ keys.T / math.sqrt(dh)) @ values)
                    continue
                scores = np.zeros((m, config.n_state_tokens))
                s_t = states[t] @ p["cross.s"][:, cols] + pos[0]
                for tau in window:
                    q_tau = ref_rmsnorm(tokens[tau], p["cross_norm"]) @ p["cross.q"][:, cols]
                    k_tau = states[tau] @ p["cross.k"][:, cols]
                    s_tau = states[tau] @ p["cross.s"][:, cols] + pos[t - tau]
                    scores += (q_tau @ k_tau.T) @ (s_tau @ s_t.T)
                scores /= math.sqrt(dh * dh * max(k, 1))
                head_outputs.append(ref_softmax(scores) @ (states[t] @ p["cross.v"][:, cols]))
            after_cross.append(tokens[t] + np.hstack(head_outputs) @ p["cross.o"])

        normed = [ref_rmsnorm(x, p["self_norm"]) for x in after_cross]
        tokens = []
        for t in range(steps):
            window = range(max(0, t - config.k_max), t + 1)
            head_outputs = []
            for h in range(heads):
                cols = slice(h * dh, (h + 1) * dh)
                q = normed[t] @ p["self.q"][:, cols]
                keys = np.vstack([normed[tau] @ p["self.k"][:, cols] for tau in window])
                values = np.vstack([normed[tau] @ p["self.v"][:, cols] for tau in window])
                head_outputs.append(ref_softmax(q @ keys.T / math.sqrt(dh)) @ values)
            x = after_cross[t] + np.hstack(head_outputs) @ p["self.o"]
            ffn = ref_gelu(ref_rmsnorm(x, p["ffn_norm"]) @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]
            tokens.append(x + ffn)

    final = ref_rmsnorm(tokens[-1], a["final_norm"])
    action = np.array([ref_gelu(final[j] @ a["head.w1"][j] + a["head.b1"][j]) @ a["head.w2"][j] + a["head.b2"][j]
                       for j in range(m)])
    return np.clip(action, -config.action_scale, config.action_scale)


class VerifyPolicyConfig:
    def verify_no_history_forces_zero_window(self) -> None:
        assert PolicyConfig(variant=Variant.NO_HISTORY, k_max=15).k_max == 0

    def verify_variant_from_string(self) -> None:
        assert PolicyConfig(variant="standard_xattn").variant == Variant.STANDARD_XATTN

    def verify_heads_must_divide_width(self) -> None:
        with pytest.raises(ConfigError, match="not divisible") as info:
            PolicyConfig(d_model=10, n_heads=4)
        assert info.value.field == "d_model"

    def verify_needs_visual_and_proprioceptive_tokens(self) -> None:
        with pytest.raises(ConfigError) as info:
            PolicyConfig(n_state_tokens=1)
        assert info.value.field == "n_state_tokens"

    def verify_grid_must_survive_two_strided_convs(self) -> None:
        with pytest.raises(ConfigError):
            PolicyConfig(obs_grid=(1, 4, 4))

    def verify_parameter_counts_comparable(self) -> None:
        counts = {variant: sum(math.prod(shape) for shape in parameter_shapes(PolicyConfig(variant=variant)).values())
                  for variant in Variant}
        assert max(counts.values()) <= 1.15 * min(counts.values())

    def verify_initialization_is_seeded(self) -> None:
        first = Policy.initialize(micro_config(), seed=3).arrays()
        second = Policy.initialize(micro_config(), seed=3).arrays()
        assert all(np.array_equal(first[name], second[name]) for name in first)

    def verify_mismatched_parameters_rejected(self) -> None:
        arrays = Policy.initialize(micro_config(), seed=0).arrays()
        arrays["head.b2"] = np.zeros(5)
        with pytest.raises(DimensionError, match="head.b2"):
            Policy.from_arrays(micro_config(), arrays)


class VerifyEncoder:
    def verify_masked_visual_token_is_mask_embedding(self) -> None:
        policy = random_policy(micro_config())
        mask_embedding = policy.params["encoder.mask_embedding"].data
        for obs in random_observations(policy.config, 3):
            tokens = encode_state(policy, obs.obs_grid, obs.proprio, visual_masked=True).tokens.data
            assert np.array_equal(tokens[:1], mask_embedding)

    def verify_visual_and_proprioceptive_tokens_separate(self) -> None:
        policy = random_policy(micro_config())
        first, second = random_observations(policy.config, 2)
        a = encode_state(policy, first.obs_grid, first.proprio, False).tokens.data
        b = encode_state(policy, second.obs_grid, first.proprio, False).tokens.data
        assert np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], b[0])

    def verify_tokens_reproducible(self) -> None:
        config = micro_config()
        obs = random_observations(config, 1)[0]
        a = encode_state(Policy.initialize(config, seed=7), obs.obs_grid, obs.proprio, False).tokens.data
        b = encode_state(Policy.initialize(config, seed=7), obs.obs_grid, obs.proprio, False).tokens.data
        assert np.array_equal(a, b)

    def verify_wrong_grid_shape(self) -> None:
        policy = random_policy(micro_config())
        with pytest.raises(DimensionError, match="obs_grid"):
            encode_state(policy, np.zeros((1, 7, 7)), np.zeros(3), False)


class VerifyInputTokens:
    def verify_joint_positions_distinguish_tokens(self) -> None:
        policy = random_policy(micro_config())
        tokens = init_input_tokens(policy, np.array([[0.4, 0.4, 1.0]])).data[0]
        assert not np.allclose(tokens[0], tokens[1])

    def verify_zero_proprio_leaves_biases_and_positions(self) -> None:
        policy = random_policy(micro_config())
        tokens = init_input_tokens(policy, np.zeros((1, 3))).data[0]
        expected = policy.params["input.context.bias"].data + policy.params["input.joint_position"].data
        assert np.array_equal(tokens, expected)

    def verify_only_proprio_changes_tokens(self) -> None:
        policy = random_policy(micro_config())
        proprio = np.array([[0.1, -0.3, 0.0]])
        assert np.array_equal(init_input_tokens(policy, proprio).data, init_input_tokens(policy, proprio.copy()).data)
        moved = proprio.copy()
        moved[0, 0] += 0.5
        diff = init_input_tokens(policy, moved).data - init_input_tokens(policy, proprio).data
        # Joint 0's token moves by its own scalar term on top of the shared context shift
        assert not np.allclose(diff[0, 0], diff[0, 1])
        assert np.allclose(diff[0, 1], 0.5 * policy.params["input.context.weight"].data[0])


class VerifyDecoderBlock:
    def verify_zero_output_projections_give_identity(self) -> None:
        policy = Policy.initialize(micro_config(), seed=0)
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 4, 2, 8)))
        z = Tensor(rng.normal(size=(1, 4, 2, 8)))
        out = decoder_block(policy.config, policy.layer(0), policy.position_table(0), x, z, sequence_plan(4, 3))
        assert np.array_equal(out.data, x.data)

    def verify_window_mismatch(self) -> None:
        policy = random_policy(micro_config())
        x, z = Tensor(np.zeros((1, 3, 2, 8))), Tensor(np.zeros((1, 2, 2, 8)))
        with pytest.raises(SequencingError):
            decoder_block(policy.config, policy.layer(0), policy.position_table(0), x, z, sequence_plan(3, 3))

    def verify_no_history_equals_sta_with_single_step_window(self) -> None:
        sta = random_policy(micro_config(Variant.STA, k_max=0))
        no_history = Policy.from_arrays(micro_config(Variant.NO_HISTORY), sta.arrays())
        inputs = stacked(random_observations(sta.config, 5))
        assert np.array_equal(forward_sequence(sta, *inputs).data, forward_sequence(no_history, *inputs).data)


class VerifyForward:
    @pytest.mark.parametrize("variant", [Variant.STA, Variant.STANDARD_XATTN])
    def verify_matches_straight_line_reference(self, variant: Variant) -> None:
        policy = random_policy(micro_config(variant), std=0.4)
        history = random_observations(policy.config, 3, masked_every=2)
        expected = ref_forward(policy.arrays(), policy.config, history)
        assert np.max(np.abs(forward_policy(policy, history) - expected)) < 1e-10

    def verify_actions_clamped(self) -> None:
        policy = random_policy(micro_config(action_scale=0.05), std=1.0)
        for steps in (1, 2, 4):
            action = forward_policy(policy, random_observations(policy.config, steps, seed=steps))
            assert action.shape == (2,)
            assert np.all(np.isfinite(action)) and np.all(np.abs(action) <= 0.05)

    def verify_history_bounds(self) -> None:
        policy = random_policy(micro_config())
        with pytest.raises(UsageError):
            forward_policy(policy, [])
        with pytest.raises(UsageError, match="exceeds"):
            forward_policy(policy, random_observations(policy.config, 5))

    @pytest.mark.parametrize("variant", list(Variant))
    def verify_future_steps_do_not_leak(self, variant: Variant) -> None:
        policy = random_policy(micro_config(variant))
        observations = random_observations(policy.config, 6)
        changed = random_observations(policy.config, 6, seed=99)
        perturbed = observations[:4] + changed[4:]
        original = forward_sequence(policy, *stacked(observations)).data
        after = forward_sequence(policy, *stacked(perturbed)).data
        assert np.array_equal(original[:, :4], after[:, :4])

    def verify_no_history_ignores_past_steps(self) -> None:
        policy = random_policy(micro_config(Variant.NO_HISTORY))
        current = random_observations(policy.config, 1, seed=5)[0]
        actions = []
        for seed in (10, 11):
            runner = PolicyRunner(policy)
            for obs in random_observations(policy.config, 4, seed=seed):
                runner.step(obs)
            actions.append(runner.step(current))
        assert np.array_equal(actions[0], actions[1])

    def verify_model_gradient(self) -> None:
        config = micro_config(n_layers=1, d_model=4, k_max=2, conv_channels=(2, 2), head_hidden=3)
        policy = random_policy(config, std=0.5)
        inputs = stacked(random_observations(config, 3, masked_every=3))
        weights = np.random.default_rng(2).normal(size=(1, 3, 2))

        def loss() -> Tensor:
            return T.sum_all(T.mul(forward_sequence(policy, *inputs), Tensor(weights)))

        policy.zero_grad()
        with ComputationTape() as tape:
            value = loss()
        T.backward(value, tape)

        for name, param in policy.params.items():
            numeric = central_difference_gradient(lambda: loss().item(), param.data)
            analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
            assert relative_error(analytic, numeric) < 1e-3, name


class VerifyPolicyRunner:
    @pytest.mark.parametrize("variant", list(Variant))
    def verify_cached_steps_equal_full_recomputation(self, variant: Variant) -> None:
        policy = random_policy(micro_config(variant))
        observations = random_observations(policy.config, 12, masked_every=4)
        full = forward_sequence(policy, *stacked(observations)).data[0]
        runner = PolicyRunner(policy)
        cached = np.array([runner.step(obs) for obs in observations])
        assert np.max(np.abs(cached - full)) < 1e-10

    def verify_truncated_history(self) -> None:
        policy = random_policy(micro_config())
        observations = random_observations(policy.config, 8)
        full = forward_sequence(policy, *stacked(observations), history_limit=1).data[0]
        runner = PolicyRunner(policy, history_limit=1)
        cached = np.array([runner.step(obs) for obs in observations])
        assert np.max(np.abs(cached - full)) < 1e-10

    def verify_history_limit_range(self) -> None:
        with pytest.raises(UsageError):
            PolicyRunner(random_policy(micro_config()), history_limit=4)

    def verify_reset_starts_over(self) -> None:
        policy = random_policy(micro_config())
        observations = random_observations(policy.config, 3)
        runner = PolicyRunner(policy)
        first = [runner.step(obs) for obs in observations]
        runner.reset()
        second = [runner.step(obs) for obs in observations]
        assert runner.timestep == 3
        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def verify_prefill_repeats_first_observation(self) -> None:
        policy = random_policy(micro_config())
        first = random_observations(policy.config, 1)[0]
        runner = PolicyRunner(policy)
        runner.prefill(first, 3)
        expected = forward_sequence(policy, *stacked([first] * 4)).data[0, -1]
        assert np.max(np.abs(runner.step(first) - expected)) < 1e-10
