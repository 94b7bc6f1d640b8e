"""
The visuomotor policy: an encoder turning each step's observation grid and proprioception
into state tokens, and a decoder whose per-joint input tokens pass through n_layers
pre-norm blocks (temporal cross-attention to the state tokens, causal self-attention,
feed-forward) before per-joint heads emit joint position deltas.

Three variants share everything but the cross-attention: STA, standard cross-attention
and NO_HISTORY (STA restricted to the current step).
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from state_transition import tensor as T
from state_transition.attention import (
    AttentionConfig,
    HistoryCache,
    Recorder,
    RelativePositionTable,
    TokenBlock,
    WindowPlan,
    affinity,
    merge_heads,
    multi_head,
    sequence_plan,
    split_heads,
    sta_kernel,
    standard_kernel,
    window_plan,
    windowed_self_attention,
)
from state_transition.errors import ConfigError, DimensionError, SequencingError, UsageError
from state_transition.tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class Variant(str, Enum):
    STA = "sta"
    STANDARD_XATTN = "standard_xattn"
    NO_HISTORY = "no_history"


@dataclass
class PolicyConfig:
    variant: Variant = Variant.STA
    n_layers: int = 4
    d_model: int = 512
    n_heads: int = 8
    n_joints: int = 2
    n_state_tokens: int = 2
    k_max: int = 15
    obs_grid: Tuple[int, int, int] = (1, 16, 16)
    proprio_dim: int = 3
    action_scale: float = 1.0
    conv_channels: Tuple[int, int] = (8, 16)
    head_hidden: int = 128
    ffn_multiplier: int = 4

    def __post_init__(self) -> None:
        self.variant = Variant(self.variant)
        self.obs_grid = tuple(self.obs_grid)
        self.conv_channels = tuple(self.conv_channels)

        if self.variant == Variant.NO_HISTORY and self.k_max != 0:
            logger.debug("NO_HISTORY variant: forcing k_max from %d to 0", self.k_max)
            self.k_max = 0

        for name in ("n_layers", "d_model", "n_heads", "n_joints", "head_hidden", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}", field=name, bound=">= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) is not divisible by n_heads ({self.n_heads})",
                              field="d_model", bound=f"multiple of n_heads ({self.n_heads})")
        if self.n_state_tokens < 2:
            raise ConfigError(f"n_state_tokens must be at least 2 (visual + proprioceptive), got {self.n_state_tokens}",
                              field="n_state_tokens", bound=">= 2")
        if self.k_max < 0:
            raise ConfigError(f"k_max must be non-negative, got {self.k_max}", field="k_max", bound=">= 0")
        if len(self.obs_grid) != 3 or min(self.obs_grid[1:]) < 5 or self.obs_grid[0] < 1:
            raise ConfigError(f"obs_grid must be (channels, height, width) with height and width >= 5, got {self.obs_grid}",
                              field="obs_grid", bound="(c >= 1, h >= 5, w >= 5)")
        if self.proprio_dim < self.n_joints:
            raise ConfigError(f"proprio_dim ({self.proprio_dim}) must cover the {self.n_joints} joint positions",
                              field="proprio_dim", bound=f">= n_joints ({self.n_joints})")
        if not self.action_scale > 0:
            raise ConfigError(f"action_scale must be positive, got {self.action_scale}",
                              field="action_scale", bound="> 0")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ConfigError(f"conv_channels must be two positive integers, got {self.conv_channels}",
                              field="conv_channels", bound="(>= 1, >= 1)")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, max_history=self.k_max)

    @property
    def n_visual_tokens(self) -> int:
        return self.n_state_tokens - 1

    @property
    def visual_features(self) -> int:
        "Flattened width of the second conv layer's output"
        _, height, width = self.obs_grid
        for _ in range(2):
            height, width = -(-height // 2), -(-width // 2)
        return self.conv_channels[1] * height * width


@dataclass
class Observation:
    "What the policy sees at one step"
    obs_grid: np.ndarray
    proprio: np.ndarray
    visual_masked: bool = False


@dataclass
class StateTokens:
    timestep: int
    tokens: Tensor
    visual_masked: bool


def parameter_shapes(config: PolicyConfig) -> Dict[str, Tuple[int, ...]]:
    "Name and shape of every parameter, in a fixed order"
    d, c_in = config.d_model, config.obs_grid[0]
    c1, c2 = config.conv_channels
    m, hidden = config.n_joints, config.head_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "encoder.conv1.weight": (c1, c_in, 3, 3),
        "encoder.conv1.bias": (c1, 1, 1),
        "encoder.conv2.weight": (c2, c1, 3, 3),
        "encoder.conv2.bias": (c2, 1, 1),
        "encoder.visual.weight": (config.visual_features, config.n_visual_tokens * d),
        "encoder.visual.bias": (config.n_visual_tokens * d,),
        "encoder.proprio1.weight": (config.proprio_dim, d),
        "encoder.proprio1.bias": (d,),
        "encoder.proprio2.weight": (d, d),
        "encoder.proprio2.bias": (d,),
        "encoder.mask_embedding": (config.n_visual_tokens, d),
        "input.joint_weight": (d,),
        "input.context.weight": (config.proprio_dim, d),
        "input.context.bias": (d,),
        "input.joint_position": (m, d),
    }
    d_head = config.attention.d_head
    cross = ("q", "k", "v", "s", "o") if config.variant != Variant.STANDARD_XATTN else ("q", "k", "v", "o")
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}."
        shapes[prefix + "cross_norm"] = (d,)
        for name in cross:
            shapes[f"{prefix}cross.{name}"] = (d, d)
        shapes[prefix + "cross.position"] = (config.n_heads, config.k_max + 1, d_head)
        shapes[prefix + "self_norm"] = (d,)
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}self.{name}"] = (d, d)
        shapes[prefix + "ffn_norm"] = (d,)
        shapes[prefix + "ffn.w1"] = (d, config.ffn_multiplier * d)
        shapes[prefix + "ffn.b1"] = (config.ffn_multiplier * d,)
        shapes[prefix + "ffn.w2"] = (config.ffn_multiplier * d, d)
        shapes[prefix + "ffn.b2"] = (d,)
    shapes["final_norm"] = (d,)
    shapes["head.w1"] = (m, d, hidden)
    shapes["head.b1"] = (m, hidden)
    shapes["head.w2"] = (m, hidden)
    shapes["head.b2"] = (m,)
    return shapes


def _initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("norm"):
        return np.ones(shape)
    # Residual output projections start at zero so every block starts as the identity
    if name.endswith("cross.o") or name.endswith("self.o") or name.endswith("ffn.w2"):
        return np.zeros(shape)
    if leaf in ("bias", "b1", "b2"):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


class Policy:
    "A PolicyConfig plus its named parameters (leaf Tensors that accept gradients)"

    def __init__(self, config: PolicyConfig, params: Dict[str, Tensor]) -> None:
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing, extra = set(expected) - set(params), set(params) - set(expected)
            raise DimensionError(f"Parameter names do not match the config: missing {sorted(missing)}, "
                                 f"unexpected {sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"Parameter {name} has shape {params[name].shape}, config expects {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def initialize(cls, config: PolicyConfig, seed: int) -> "Policy":
        rng = np.random.default_rng(seed)
        params = {name: Tensor(_initial_value(name, shape, rng), requires_grad=True)
                  for name, shape in parameter_shapes(config).items()}
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: PolicyConfig, arrays: Dict[str, np.ndarray]) -> "Policy":
        return cls(config, {name: Tensor(value, requires_grad=True) for name, value in arrays.items()})

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {name: tensor.grad for name, tensor in self.params.items() if tensor.grad is not None}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def parameter_count(self) -> int:
        return sum(tensor.data.size for tensor in self.params.values())

    def layer(self, index: int) -> Dict[str, Tensor]:
        prefix = f"layers.{index}."
        return {name[len(prefix):]: tensor for name, tensor in self.params.items() if name.startswith(prefix)}

    def position_table(self, layer: int) -> RelativePositionTable:
        return RelativePositionTable(self.params[f"layers.{layer}.cross.position"])


def _as_batch(value: np.ndarray, trailing: Tuple[int, ...], what: str) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.ndim != len(trailing) + 1 or value.shape[1:] != tuple(trailing):
        raise DimensionError(f"{what} of shape {value.shape} is not a batch of {tuple(trailing)}")
    return value


def encode_states(policy: Policy, obs_grid: np.ndarray, proprio: np.ndarray, visual_masked: np.ndarray) -> Tensor:
    """
    State tokens of a batch of steps: obs_grid [N, c, h, w], proprio [N, proprio_dim] and
    visual_masked [N] give [N, n_state_tokens, d_model], visual tokens first. Masked steps
    carry the learned mask embedding in their visual slots.
    """
    config, p = policy.config, policy.params
    obs_grid = _as_batch(obs_grid, config.obs_grid, "obs_grid")
    proprio = _as_batch(proprio, (config.proprio_dim,), "proprio")
    visual_masked = np.asarray(visual_masked, dtype=bool)
    if not obs_grid.shape[0] == proprio.shape[0] == visual_masked.shape[0]:
        raise DimensionError(f"Batch sizes differ: obs_grid {obs_grid.shape}, proprio {proprio.shape}, "
                             f"visual_masked {visual_masked.shape}")
    batch, d = obs_grid.shape[0], config.d_model

    hidden = T.gelu(T.add(T.conv2d(Tensor(obs_grid), p["encoder.conv1.weight"], stride=2), p["encoder.conv1.bias"]))
    hidden = T.gelu(T.add(T.conv2d(hidden, p["encoder.conv2.weight"], stride=2), p["encoder.conv2.bias"]))
    flat = T.reshape(hidden, (batch, config.visual_features))
    visual = T.reshape(T.linear(flat, p["encoder.visual.weight"], p["encoder.visual.bias"]),
                       (batch, config.n_visual_tokens, d))

    keep = (~visual_masked).astype(np.float64).reshape(batch, 1, 1)
    visual = T.add(T.mul(visual, Tensor(keep)), T.mul(p["encoder.mask_embedding"], Tensor(1.0 - keep)))

    proprio_hidden = T.gelu(T.linear(Tensor(proprio), p["encoder.proprio1.weight"], p["encoder.proprio1.bias"]))
    proprio_token = T.linear(proprio_hidden, p["encoder.proprio2.weight"], p["encoder.proprio2.bias"])
    return T.concat([visual, T.reshape(proprio_token, (batch, 1, d))], axis=1)


def encode_state(policy: Policy, obs_grid: np.ndarray, proprio: np.ndarray, visual_masked: bool,
                 timestep: int = 0) -> StateTokens:
    tokens = encode_states(policy, np.asarray(obs_grid)[None], np.asarray(proprio)[None], np.array([visual_masked]))
    return StateTokens(timestep=timestep, tokens=T.reshape(tokens, tokens.shape[1:]), visual_masked=visual_masked)


def init_input_tokens(policy: Policy, proprio: np.ndarray) -> Tensor:
    """
    Decoder input tokens [N, m, d_model] for proprio [N, proprio_dim]: joint i's position
    (proprio[:, i]) scales a shared joint embedding, a linear context of the whole vector is
    added to every token, and token i gets joint i's absolute positional embedding.
    """
    config, p = policy.config, policy.params
    proprio = _as_batch(proprio, (config.proprio_dim,), "proprio")
    batch, m = proprio.shape[0], config.n_joints

    joint_values = Tensor(proprio[:, :m].reshape(batch, m, 1))
    context = T.reshape(T.linear(Tensor(proprio), p["input.context.weight"], p["input.context.bias"]),
                        (batch, 1, config.d_model))
    return T.add(T.add(T.mul(joint_values, p["input.joint_weight"]), context), p["input.joint_position"])


def _heads(x: Tensor, weight: Tensor, n_heads: int) -> Tensor:
    return split_heads(T.linear(x, weight), n_heads)


def decoder_block(config: PolicyConfig, layer: Dict[str, Tensor], pos: RelativePositionTable,
                  x: Tensor, z: Tensor, plan: WindowPlan, recorder: Optional[Recorder] = None) -> Tensor:
    """
    One pre-norm block over a window of steps: x [B, T, m, d_model] are the decoder tokens,
    z [B, T, n, d_model] the state tokens of the same steps.
    """
    if x.shape[:2] != z.shape[:2]:
        raise SequencingError(f"Decoder tokens cover {x.shape[:2]} (batch, steps) but state tokens cover {z.shape[:2]}")
    attention, heads = config.attention, config.n_heads

    q = _heads(T.rmsnorm(x, layer["cross_norm"]), layer["cross.q"], heads)
    k, v = _heads(z, layer["cross.k"], heads), _heads(z, layer["cross.v"], heads)
    if config.variant == Variant.STANDARD_XATTN:
        cross = multi_head(attention, lambda q, k, v: standard_kernel(q, k, v, pos, plan, recorder),
                           layer["cross.o"], q=q, k=k, v=v)
    else:
        s = _heads(z, layer["cross.s"], heads)
        cross = multi_head(attention, lambda q, k, s, v: sta_kernel(affinity(q, k), q.shape[-1], s, v, pos, plan, recorder),
                           layer["cross.o"], q=q, k=k, s=s, v=v)
    x = T.add(x, cross)

    h = T.rmsnorm(x, layer["self_norm"])
    q, k, v = (_heads(h, layer[f"self.{name}"], heads) for name in ("q", "k", "v"))
    x = T.add(x, multi_head(attention, lambda q, k, v: windowed_self_attention(q, k, v, plan),
                            layer["self.o"], q=q, k=k, v=v))

    return T.add(x, feed_forward(layer, x))


def feed_forward(layer: Dict[str, Tensor], x: Tensor) -> Tensor:
    hidden = T.gelu(T.linear(T.rmsnorm(x, layer["ffn_norm"]), layer["ffn.w1"], layer["ffn.b1"]))
    return T.linear(hidden, layer["ffn.w2"], layer["ffn.b2"])


def action_heads(policy: Policy, x: Tensor) -> Tensor:
    "Per-joint two-layer MLPs on decoder outputs [..., m, d_model]; returns clipped deltas [..., m]"
    p, config = policy.params, policy.config
    lead = x.shape[:-2]
    flat = T.reshape(T.rmsnorm(x, p["final_norm"]), (-1, config.n_joints, config.d_model))
    hidden = T.gelu(T.add(T.einsum("bjd,jdh->bjh", flat, p["head.w1"]), p["head.b1"]))
    out = T.add(T.einsum("bjh,jh->bj", hidden, p["head.w2"]), p["head.b2"])
    return T.reshape(T.clip(out, config.action_scale), lead + (config.n_joints,))


def forward_sequence(policy: Policy, obs_grid: np.ndarray, proprio: np.ndarray, visual_masked: np.ndarray,
                     history_limit: Optional[int] = None) -> Tensor:
    """
    Actions for every step of a batch of sequences: obs_grid [B, T, c, h, w],
    proprio [B, T, proprio_dim], visual_masked [B, T]. Step t attends to steps
    max(0, t - history_limit)..t at every layer. Returns [B, T, m].
    """
    config = policy.config
    history_limit = config.k_max if history_limit is None else history_limit
    if not 0 <= history_limit <= config.k_max:
        raise UsageError(f"history_limit {history_limit} is outside 0..{config.k_max}")
    obs_grid = np.asarray(obs_grid, dtype=np.float64)
    batch, steps = obs_grid.shape[:2]
    proprio = np.asarray(proprio, dtype=np.float64)

    z = encode_states(policy, obs_grid.reshape((batch * steps,) + obs_grid.shape[2:]),
                      proprio.reshape(batch * steps, -1), np.asarray(visual_masked).reshape(-1))
    z = T.reshape(z, (batch, steps, config.n_state_tokens, config.d_model))
    x = T.reshape(init_input_tokens(policy, proprio.reshape(batch * steps, -1)),
                  (batch, steps, config.n_joints, config.d_model))

    plan = sequence_plan(steps, history_limit)
    for layer in range(config.n_layers):
        x = decoder_block(config, policy.layer(layer), policy.position_table(layer), x, z, plan)
    return action_heads(policy, x)


def forward_policy(policy: Policy, history: Sequence[Observation]) -> np.ndarray:
    "Action [m] for the last step of a history of 1..k_max+1 observations, oldest first"
    if len(history) == 0:
        raise UsageError("forward_policy needs at least the current observation")
    if len(history) > policy.config.k_max + 1:
        raise UsageError(f"History of {len(history)} steps exceeds k_max + 1 = {policy.config.k_max + 1}")
    actions = forward_sequence(
        policy,
        np.stack([step.obs_grid for step in history])[None],
        np.stack([step.proprio for step in history])[None],
        np.array([[step.visual_masked for step in history]]),
    )
    return actions.data[0, -1]


@dataclass
class _LayerCache:
    cross: HistoryCache
    # Self-attention keys and values of the decoder tokens, [H, m, d_head] per step
    self_keys: Deque[Tensor] = field(default_factory=deque)
    self_values: Deque[Tensor] = field(default_factory=deque)


class PolicyRunner:
    """
    Step-by-step inference over one trajectory. Each layer caches the projected state-token
    blocks and same-time affinities of its last k_max + 1 steps, and the self-attention keys
    and values of its decoder tokens, so a step only projects the newest tokens.
    """

    def __init__(self, policy: Policy, history_limit: Optional[int] = None) -> None:
        config = policy.config
        self.policy = policy
        self.history_limit = config.k_max if history_limit is None else history_limit
        if not 0 <= self.history_limit <= config.k_max:
            raise UsageError(f"history_limit {self.history_limit} is outside 0..{config.k_max}")
        self.reset()

    def reset(self) -> None:
        capacity = self.policy.config.k_max + 1
        self.timestep = 0
        self.layers: List[_LayerCache] = [
            _LayerCache(HistoryCache(capacity), deque(maxlen=capacity), deque(maxlen=capacity))
            for _ in range(self.policy.config.n_layers)
        ]

    def _step_heads(self, x: Tensor, weight: Tensor) -> Tensor:
        "[tokens, d_model] -> [H, tokens, d_head]"
        heads = _heads(T.reshape(x, (1, 1) + x.shape), weight, self.policy.config.n_heads)
        return T.reshape(heads, (heads.shape[1],) + heads.shape[3:])

    def _project_out(self, heads: Tensor, weight: Tensor) -> Tensor:
        "[H, m, d_head] -> [m, d_model] through the output projection"
        merged = merge_heads(T.reshape(heads, (1, heads.shape[0], 1) + heads.shape[1:]))
        return T.linear(T.reshape(merged, merged.shape[2:]), weight)

    def step(self, observation: Observation, recorder: Optional[Recorder] = None) -> np.ndarray:
        """
        Feed the next observation and return the action [m]. recorder, if given, receives the
        last layer's cross-attention internals.
        """
        policy, config = self.policy, self.policy.config
        z = encode_state(policy, observation.obs_grid, observation.proprio, observation.visual_masked).tokens
        x = T.reshape(init_input_tokens(policy, np.asarray(observation.proprio)[None]), (config.n_joints, config.d_model))

        for index, cache in enumerate(self.layers):
            layer, pos = policy.layer(index), policy.position_table(index)
            layer_recorder = recorder if index == config.n_layers - 1 else None

            q = self._step_heads(T.rmsnorm(x, layer["cross_norm"]), layer["cross.q"])
            s = None if config.variant == Variant.STANDARD_XATTN else self._step_heads(z, layer["cross.s"])
            cache.cross.push(TokenBlock(timestep=self.timestep, q=q, k=self._step_heads(z, layer["cross.k"]),
                                        v=self._step_heads(z, layer["cross.v"]), s=s))
            if config.variant == Variant.STANDARD_XATTN:
                cross = cache.cross.standard_step(pos, self.history_limit, layer_recorder)
            else:
                cross = cache.cross.sta_step(pos, self.history_limit, layer_recorder)
            x = T.add(x, self._project_out(cross, layer["cross.o"]))

            h = T.rmsnorm(x, layer["self_norm"])
            cache.self_keys.append(self._step_heads(h, layer["self.k"]))
            cache.self_values.append(self._step_heads(h, layer["self.v"]))
            x = T.add(x, self._project_out(self._self_attend(cache, self._step_heads(h, layer["self.q"])), layer["self.o"]))

            x = T.add(x, feed_forward(layer, x))

        self.timestep += 1
        return action_heads(policy, x).data

    def _self_attend(self, cache: _LayerCache, q: Tensor) -> Tensor:
        width = min(len(cache.self_keys), self.history_limit + 1)

        def stacked(blocks: Deque[Tensor]) -> Tensor:
            window = T.stack(list(blocks)[-width:], axis=1)
            return T.reshape(window, (1,) + window.shape)

        q = T.reshape(q, (1, q.shape[0], 1) + q.shape[1:])
        out = windowed_self_attention(q, stacked(cache.self_keys), stacked(cache.self_values), window_plan(width))
        return T.reshape(out, (out.shape[1],) + out.shape[3:])

    def prefill(self, observation: Observation, steps: int) -> None:
        "Fill the history with steps copies of observation, discarding their actions"
        for _ in range(steps):
            self.step(observation)
