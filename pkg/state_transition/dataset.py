"""
Expert demonstration datasets.

A dataset directory holds three files:

- ``episodes.jsonl``: one JSON record per line, an ``episode`` record followed by one
  ``step`` record per step of that episode;
- ``observations.bin``: every step's observation grid as little-endian float64, in record order;
- ``manifest.json``: format_version, seed, counts, environment and noise settings, their hash,
  and success statistics.
"""
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
from tqdm import tqdm

from shared_utils import fingerprint, plain_data
from state_transition.errors import DatasetError
from state_transition.grid_env import (
    EnvConfig,
    NoiseConfig,
    NoiseSegment,
    end_effector,
    env_reset,
    env_step,
    noisy_expert_action,
    proprio_vector,
    render,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
RECORDS_FILE = "episodes.jsonl"
OBSERVATIONS_FILE = "observations.bin"
MANIFEST_FILE = "manifest.json"
FAILURE_WARNING_FRACTION = 0.2


@dataclass
class StepRecord:
    obs_grid: np.ndarray
    proprio: np.ndarray
    expert_action: np.ndarray
    noise_active: bool
    success_so_far: bool


@dataclass
class Episode:
    "Per-step arrays of one rollout: obs [T,c,h,w], proprio [T,p], actions [T,m], flags [T]"
    obs: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    noise_active: np.ndarray
    success_so_far: np.ndarray
    success: bool
    seed: int
    occluded: bool = False
    noise_segments: List[NoiseSegment] = field(default_factory=list)
    # Distance from the end-effector to its current true target, before each step's action
    target_distance: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> List[StepRecord]:
        return [StepRecord(self.obs[t], self.proprio[t], self.actions[t], bool(self.noise_active[t]),
                           bool(self.success_so_far[t])) for t in range(len(self))]

    def has_detour(self) -> bool:
        "True when the distance to the current target ever grows between two steps of the same phase"
        if self.target_distance is None or len(self.target_distance) < 2:
            return False
        # the last proprio entry is the holding flag; the target switches when it flips
        same_phase = self.proprio[1:, -1] == self.proprio[:-1, -1]
        return bool(np.any((np.diff(self.target_distance) > 1e-9) & same_phase))


@dataclass
class Dataset:
    episodes: List[Episode]
    manifest: Dict[str, Any]

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def fingerprint(self) -> str:
        return self.manifest.get("content_hash", "")


def rollout_expert(seed: int, env_config: EnvConfig, noise_config: Optional[NoiseConfig] = None,
                   occluded: Optional[bool] = None) -> Episode:
    "Roll the scripted expert for one episode, labelling the steps it took under corrupted perception"
    state = env_reset(seed, env_config, noise_config, occluded)
    obs, proprio, actions, noise_flags, success_flags, distances = [], [], [], [], [], []
    success = False
    done = False
    while not done:
        target = state.goal_pos if state.holding else state.object_pos
        distances.append(float(np.linalg.norm(end_effector(state.arm) - target)))
        obs.append(render(state, env_config))
        proprio.append(proprio_vector(state, env_config))
        action, noisy = noisy_expert_action(state, env_config)
        actions.append(action)
        noise_flags.append(noisy)

        state, done, success = env_step(state, action, env_config)
        success_flags.append(success)

    return Episode(obs=np.array(obs), proprio=np.array(proprio), actions=np.array(actions),
                   noise_active=np.array(noise_flags, dtype=bool), success_so_far=np.array(success_flags, dtype=bool),
                   success=success, seed=seed, occluded=state.occluded, noise_segments=list(state.noise_segments),
                   target_distance=np.array(distances))


def _rollouts(seeds: List[int], env_config: EnvConfig, noise_config: NoiseConfig, workers: int,
              progress: bool) -> Iterator[Episode]:
    work = partial(rollout_expert, env_config=env_config, noise_config=noise_config)
    if workers <= 1:
        yield from tqdm(map(work, seeds), total=len(seeds), desc="episodes", disable=not progress)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map keeps results in seed order whatever order they finish in
        yield from tqdm(pool.map(work, seeds, chunksize=16), total=len(seeds), desc="episodes", disable=not progress)


def generate_dataset(out_dir: Path, n_episodes: int, noise_on: bool, seed: int,
                     env_config: Optional[EnvConfig] = None, noise_config: Optional[NoiseConfig] = None,
                     workers: int = 1, progress: bool = False) -> Dataset:
    """
    Roll the expert on seeds seed .. seed + n_episodes - 1, keep the successful episodes and
    write them to out_dir. noise_on=False gives successful-only demonstrations.
    """
    env_config = env_config or EnvConfig()
    noise_config = replace(noise_config or NoiseConfig(), enabled=noise_on)
    seeds = [seed + index for index in range(n_episodes)]

    kept: List[Episode] = []
    failed = 0
    for episode in _rollouts(seeds, env_config, noise_config, workers, progress):
        if episode.success:
            kept.append(episode)
        else:
            failed += 1

    if n_episodes > 0 and failed / n_episodes > FAILURE_WARNING_FRACTION:
        logger.warning("The expert failed %d of %d episodes", failed, n_episodes)

    settings = {"env": plain_data(env_config), "noise": plain_data(noise_config)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "n_episodes_requested": n_episodes,
        "n_episodes": len(kept),
        "n_failed": failed,
        "n_steps": int(sum(len(e) for e in kept)),
        "obs_shape": list(env_config.obs_shape),
        "n_joints": env_config.n_joints,
        "proprio_dim": env_config.proprio_dim,
        "settings": settings,
        "config_hash": fingerprint(settings),
        "statistics": {
            "expert_success_rate": len(kept) / n_episodes if n_episodes else 0.0,
            "noised_episode_fraction": float(np.mean([bool(e.noise_segments) for e in kept])) if kept else 0.0,
            "noise_active_step_fraction": (float(np.mean(np.concatenate([e.noise_active for e in kept])))
                                           if kept else 0.0),
            "detour_fraction": float(np.mean([e.has_detour() for e in kept])) if kept else 0.0,
            "occluded_fraction": float(np.mean([e.occluded for e in kept])) if kept else 0.0,
        },
    }
    dataset = Dataset(kept, manifest)
    write_dataset(Path(out_dir), dataset)
    logger.info("Generated %d episodes (%d failed, %d steps) into %s",
                len(kept), failed, manifest["n_steps"], out_dir)
    return dataset


def _episode_record(index: int, episode: Episode) -> dict:
    return {"type": "episode", "episode": index, "seed": episode.seed, "success": episode.success,
            "occluded": episode.occluded, "n_steps": len(episode),
            "noise_segments": [plain_data(s) for s in episode.noise_segments]}


def _step_record(index: int, t: int, episode: Episode) -> dict:
    return {"type": "step", "episode": index, "step": t,
            "proprio": episode.proprio[t].tolist(), "expert_action": episode.actions[t].tolist(),
            "noise_active": bool(episode.noise_active[t]), "success_so_far": bool(episode.success_so_far[t]),
            "target_distance": float(episode.target_distance[t]) if episode.target_distance is not None else None}


def write_dataset(out_dir: Path, dataset: Dataset) -> None:
    digest = hashlib.sha256()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / RECORDS_FILE, "w") as records, open(out_dir / OBSERVATIONS_FILE, "wb") as observations:
            for index, episode in enumerate(dataset.episodes):
                lines = [_episode_record(index, episode)] + [_step_record(index, t, episode) for t in range(len(episode))]
                for line in lines:
                    text = json.dumps(line, sort_keys=True) + "\n"
                    records.write(text)
                    digest.update(text.encode("utf-8"))
                payload = np.ascontiguousarray(episode.obs, dtype="<f8").tobytes()
                observations.write(payload)
                digest.update(payload)

        dataset.manifest["content_hash"] = digest.hexdigest()
        with open(out_dir / MANIFEST_FILE, "w") as f:
            json.dump(dataset.manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DatasetError(f"Could not write dataset to {out_dir}: {e}") from e


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    try:
        with open(path / MANIFEST_FILE) as f:
            manifest = json.load(f)
    except OSError as e:
        raise DatasetError(f"Could not read {path / MANIFEST_FILE}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path / MANIFEST_FILE} is not valid JSON: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"{path / MANIFEST_FILE}: unsupported format_version {manifest.get('format_version')!r}")

    obs_shape = tuple(manifest["obs_shape"])
    try:
        raw = (path / OBSERVATIONS_FILE).read_bytes()
        with open(path / RECORDS_FILE) as f:
            lines = [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise DatasetError(f"Could not read dataset files in {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path / RECORDS_FILE}: malformed record ({e})") from e

    per_step = int(np.prod(obs_shape))
    if len(raw) != 8 * per_step * manifest["n_steps"]:
        raise DatasetError(f"{path / OBSERVATIONS_FILE} holds {len(raw)} bytes, "
                           f"expected {8 * per_step * manifest['n_steps']} for {manifest['n_steps']} steps")
    all_obs = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape((-1,) + obs_shape)

    episodes: List[Episode] = []
    cursor, offset = 0, 0
    while cursor < len(lines):
        header = lines[cursor]
        if header.get("type") != "episode":
            raise DatasetError(f"{path / RECORDS_FILE}: expected an episode record on line {cursor + 1}")
        steps = lines[cursor + 1:cursor + 1 + header["n_steps"]]
        if len(steps) != header["n_steps"] or any(s.get("type") != "step" for s in steps):
            raise DatasetError(f"{path / RECORDS_FILE}: episode {header['episode']} is missing step records")
        distances = [s.get("target_distance") for s in steps]
        episodes.append(Episode(
            obs=all_obs[offset:offset + len(steps)],
            proprio=np.array([s["proprio"] for s in steps]),
            actions=np.array([s["expert_action"] for s in steps]),
            noise_active=np.array([s["noise_active"] for s in steps], dtype=bool),
            success_so_far=np.array([s["success_so_far"] for s in steps], dtype=bool),
            success=header["success"],
            seed=header["seed"],
            occluded=header["occluded"],
            noise_segments=[NoiseSegment(s["start"], s["length"], tuple(s["offset"])) for s in header["noise_segments"]],
            target_distance=None if None in distances else np.array(distances),
        ))
        cursor += 1 + len(steps)
        offset += len(steps)

    if len(episodes) != manifest["n_episodes"]:
        raise DatasetError(f"{path / RECORDS_FILE} holds {len(episodes)} episodes, manifest says {manifest['n_episodes']}")
    return Dataset(episodes, manifest)
