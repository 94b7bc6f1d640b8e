"""
A deterministic 2D reach-grasp-place task on a square grid.

The arm's joints each drive one axis of the end-effector (joint i drives axis i % 2; the
end-effector coordinate on an axis is the mean of its joints). The object is grasped
automatically once the end-effector comes within the grasp radius, then travels with it;
the episode succeeds when the held object reaches the goal. On occluded episodes the
object is drawn only on the first step, so a policy must remember where it was.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from state_transition.errors import ConfigError

logger = logging.getLogger(__name__)

# Cell codes of the rendered grid; a cell holding several things carries their sum
ARM_CODE = 1.0
OBJECT_CODE = 2.0
GOAL_CODE = 4.0


@dataclass
class EnvConfig:
    grid_size: int = 16
    n_joints: int = 2
    horizon: int = 60
    grasp_radius: float = 0.75
    expert_gain: float = 0.5
    max_delta: float = 1.0
    occlusion_prob: float = 0.5
    min_separation: float = 3.0
    home: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        self.home = tuple(float(x) for x in self.home)
        if self.grid_size < 5:
            raise ConfigError(f"grid_size must be at least 5, got {self.grid_size}", field="grid_size", bound=">= 5")
        if self.n_joints < 2:
            raise ConfigError(f"n_joints must be at least 2 (one per axis), got {self.n_joints}",
                              field="n_joints", bound=">= 2")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be positive, got {self.horizon}", field="horizon", bound=">= 1")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigError(f"occlusion_prob must be a probability, got {self.occlusion_prob}",
                              field="occlusion_prob", bound="[0, 1]")
        for name in ("grasp_radius", "expert_gain", "max_delta", "min_separation"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}", field=name, bound="> 0")
        if len(self.home) != 2 or not all(0 <= x <= self.grid_size - 1 for x in self.home):
            raise ConfigError(f"home {self.home} is outside the grid", field="home", bound=f"[0, {self.grid_size - 1}]^2")
        # every cell has a corner at least this far away, so placement always has a candidate
        reach = (self.grid_size - 1) / np.sqrt(2.0)
        if self.min_separation > reach:
            raise ConfigError(f"min_separation {self.min_separation} cannot be met on a {self.grid_size} grid",
                              field="min_separation", bound=f"<= {reach:.3f}")

    @property
    def proprio_dim(self) -> int:
        return self.n_joints + 1

    @property
    def obs_shape(self) -> Tuple[int, int, int]:
        return (1, self.grid_size, self.grid_size)


@dataclass
class NoiseConfig:
    enabled: bool = True
    episode_prob: float = 0.7
    start_range: Tuple[int, int] = (2, 30)
    length_range: Tuple[int, int] = (3, 8)
    magnitude_range: Tuple[float, float] = (2.0, 4.0)

    def __post_init__(self) -> None:
        self.start_range = tuple(self.start_range)
        self.length_range = tuple(self.length_range)
        self.magnitude_range = tuple(self.magnitude_range)
        if not 0.0 <= self.episode_prob <= 1.0:
            raise ConfigError(f"episode_prob must be a probability, got {self.episode_prob}",
                              field="episode_prob", bound="[0, 1]")
        for name, low in (("start_range", 2), ("length_range", 1), ("magnitude_range", 0)):
            lo, hi = getattr(self, name)
            if not low <= lo <= hi:
                raise ConfigError(f"{name} must satisfy {low} <= low <= high, got {(lo, hi)}",
                                  field=name, bound=f"{low} <= low <= high")


@dataclass(frozen=True)
class NoiseSegment:
    "Perception offset applied to the expert's current target for length steps from start"
    start: int
    length: int
    offset: Tuple[float, float]

    def covers(self, step: int) -> bool:
        return self.start <= step < self.start + self.length


@dataclass
class EnvState:
    arm: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    holding: bool
    step_index: int
    occlusion_schedule: np.ndarray
    rng_seed: int
    occluded: bool = False
    noise_segments: List[NoiseSegment] = field(default_factory=list)


def end_effector(arm: np.ndarray) -> np.ndarray:
    return np.array([arm[0::2].mean(), arm[1::2].mean()])


def env_reset(seed: int, config: EnvConfig, noise: Optional[NoiseConfig] = None,
              occluded: Optional[bool] = None) -> EnvState:
    """
    Place the object and goal on distinct cells at least min_separation apart (and the object
    at least that far from home, so reaching it takes a few steps), put the arm at home and
    draw the occlusion and noise schedules. occluded overrides the occlusion draw when given.
    """
    rng = np.random.default_rng(seed)
    home = np.array(config.home)
    object_pos = _place_apart(rng, home, config)
    goal_pos = _place_apart(rng, object_pos, config)

    occlusion_draw = rng.random() < config.occlusion_prob
    occluded = occlusion_draw if occluded is None else occluded
    schedule = np.zeros(config.horizon + 1, dtype=bool)
    if occluded:
        schedule[1:] = True

    arm = np.array([home[i % 2] for i in range(config.n_joints)])
    state = EnvState(arm=arm, object_pos=object_pos, goal_pos=goal_pos, holding=False, step_index=0,
                     occlusion_schedule=schedule, rng_seed=seed, occluded=occluded)
    if noise is not None and noise.enabled:
        reference = expert_reference(state, config)
        state.noise_segments = inject_noise_schedule(rng, len(reference), noise, reference)
    return state


def _place_apart(rng: np.random.Generator, anchor: np.ndarray, config: EnvConfig) -> np.ndarray:
    "A uniformly drawn grid cell at least min_separation from anchor"
    cells = np.argwhere(np.ones((config.grid_size, config.grid_size), dtype=bool)).astype(np.float64)
    allowed = cells[np.linalg.norm(cells - anchor, axis=1) >= config.min_separation]
    return allowed[rng.integers(len(allowed))].copy()


@dataclass(frozen=True)
class ExpertReference:
    "End-effector and true-target positions before each action of a noise-free expert rollout, [T, 2] each"
    end_effector: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.target)


def expert_reference(state: EnvState, config: EnvConfig) -> ExpertReference:
    ee, target = [], []
    done = False
    while not done:
        ee.append(end_effector(state.arm))
        target.append(state.goal_pos if state.holding else state.object_pos)
        state, done, _ = env_step(state, expert_action(state, state.object_pos, config), config)
    return ExpertReference(np.array(ee), np.array(target))


# Largest angle between a segment's offset and the direction from the target to the end-effector
MAX_DEVIATION = np.pi / 6
# How much closer than the offset's reach the end-effector must be for the first noisy step to retreat
RETREAT_MARGIN = 0.1


def inject_noise_schedule(rng: np.random.Generator, episode_length: int, noise: NoiseConfig,
                          reference: Optional[ExpertReference] = None) -> List[NoiseSegment]:
    """
    At most one perception-noise segment per episode; none when noise is disabled.

    Without a reference the start is uniform over start_range (capped at episode_length - 1)
    and the offset points anywhere. With the noise-free rollout of the same episode as
    reference, the start is drawn from the steps where the end-effector is close enough to its
    target for the offset to pull it away, and the offset points back past the end-effector
    (within MAX_DEVIATION), so the segment shows up as a detour the expert then recovers from.
    """
    if not noise.enabled or rng.random() >= noise.episode_prob:
        return []
    lo, hi = noise.start_range
    hi = min(hi, episode_length - 1)
    if hi < lo:
        return []
    length = int(rng.integers(noise.length_range[0], noise.length_range[1] + 1))
    magnitude = rng.uniform(*noise.magnitude_range)
    if reference is None:
        start = int(rng.integers(lo, hi + 1))
        angle = rng.uniform(0.0, 2.0 * np.pi)
        return [NoiseSegment(start=start, length=length,
                             offset=(float(magnitude * np.cos(angle)), float(magnitude * np.sin(angle))))]

    deviation = rng.uniform(-MAX_DEVIATION, MAX_DEVIATION)
    steps = np.arange(lo, hi + 1)
    gaps = reference.end_effector[steps] - reference.target[steps]
    distances = np.linalg.norm(gaps, axis=1)
    close = steps[distances < magnitude * np.cos(deviation) - RETREAT_MARGIN]
    # no close step before start_range ends: the segment still fires, it just may not detour
    start = int(rng.choice(close if len(close) else steps))
    gap = reference.end_effector[start] - reference.target[start]
    away = np.arctan2(gap[1], gap[0]) if np.linalg.norm(gap) > 1e-9 else 0.0
    angle = away + deviation
    return [NoiseSegment(start=start, length=length,
                         offset=(float(magnitude * np.cos(angle)), float(magnitude * np.sin(angle))))]


def noise_offset(state: EnvState) -> Optional[np.ndarray]:
    for segment in state.noise_segments:
        if segment.covers(state.step_index):
            return np.array(segment.offset)
    return None


def env_step(state: EnvState, action: np.ndarray, config: EnvConfig) -> Tuple[EnvState, bool, bool]:
    "Apply joint deltas (clamped to +-max_delta); returns (next state, done, success)"
    action = np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0,
                           posinf=config.max_delta, neginf=-config.max_delta)
    delta = np.clip(action, -config.max_delta, config.max_delta)
    arm = np.clip(state.arm + delta, 0.0, config.grid_size - 1.0)
    ee = end_effector(arm)

    holding = state.holding or bool(np.linalg.norm(ee - state.object_pos) <= config.grasp_radius)
    object_pos = ee.copy() if holding else state.object_pos
    success = holding and bool(np.linalg.norm(ee - state.goal_pos) <= config.grasp_radius)
    step_index = state.step_index + 1
    done = success or step_index >= config.horizon

    return replace(state, arm=arm, object_pos=object_pos, holding=holding, step_index=step_index), done, success


def expert_action(state: EnvState, perceived_object_pos: np.ndarray, config: EnvConfig,
                  perceived_goal_pos: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Proportional step of gain expert_gain toward the perceived object, or toward the goal once
    holding, clamped per joint. Every joint on an axis gets that axis's delta.
    """
    goal = state.goal_pos if perceived_goal_pos is None else perceived_goal_pos
    target = np.asarray(goal if state.holding else perceived_object_pos, dtype=np.float64)
    target = np.clip(target, 0.0, config.grid_size - 1.0)
    axis_delta = np.clip(config.expert_gain * (target - end_effector(state.arm)), -config.max_delta, config.max_delta)
    return np.array([axis_delta[i % 2] for i in range(config.n_joints)])


def noisy_expert_action(state: EnvState, config: EnvConfig) -> Tuple[np.ndarray, bool]:
    "The expert's action under the state's noise schedule, and whether noise was active"
    offset = noise_offset(state)
    if offset is None:
        return expert_action(state, state.object_pos, config), False
    if state.holding:
        return expert_action(state, state.object_pos, config, perceived_goal_pos=state.goal_pos + offset), True
    return expert_action(state, state.object_pos + offset, config), True


def grid_cell(position: np.ndarray) -> Tuple[int, int]:
    x, y = np.rint(position).astype(int)
    return int(x), int(y)


def render(state: EnvState, config: EnvConfig) -> np.ndarray:
    "Occupancy grid [1, size, size] indexed [0, x, y]; the object is left out on occluded steps"
    grid = np.zeros(config.obs_shape)
    grid[(0,) + grid_cell(end_effector(state.arm))] += ARM_CODE
    grid[(0,) + grid_cell(state.goal_pos)] += GOAL_CODE
    if not state.occlusion_schedule[min(state.step_index, len(state.occlusion_schedule) - 1)]:
        grid[(0,) + grid_cell(state.object_pos)] += OBJECT_CODE
    return grid


def decode_grid(grid: np.ndarray) -> dict:
    "Cells carrying each code, e.g. {'arm': [(x, y)], 'object': [], 'goal': [(x, y)]}"
    codes = grid[0].astype(int)
    return {name: [tuple(int(i) for i in cell) for cell in np.argwhere(codes & int(code))]
            for name, code in (("arm", ARM_CODE), ("object", OBJECT_CODE), ("goal", GOAL_CODE))}


def proprio_vector(state: EnvState, config: EnvConfig) -> np.ndarray:
    "Joint positions scaled to [0, 1], then the holding flag"
    return np.append(state.arm / (config.grid_size - 1.0), float(state.holding))
