"""
Checkpoint container:

    STA-LAB-CHECKPOINT
    <header length in bytes>
    <JSON header: format_version, policy config, metadata, optimizer scalars, array index>
    <payload: every array as little-endian float64, in index order>
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from shared_utils import plain_data
from state_transition.errors import (
    CheckpointHeaderError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from state_transition.optim import AdamState
from state_transition.policy import Policy, PolicyConfig

logger = logging.getLogger(__name__)

MAGIC = b"STA-LAB-CHECKPOINT\n"
FORMAT_VERSION = 1
FIRST_MOMENT_PREFIX = "adam.first."
SECOND_MOMENT_PREFIX = "adam.second."


@dataclass
class Checkpoint:
    config: PolicyConfig
    params: Dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None
    # epoch, seed, dataset fingerprint, ...
    metadata: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_policy(cls, policy: Policy, optimizer: Optional[AdamState] = None, **metadata) -> "Checkpoint":
        params = {name: value.copy() for name, value in policy.arrays().items()}
        return cls(config=policy.config, params=params, optimizer=optimizer, metadata=metadata)

    def policy(self) -> Policy:
        return Policy.from_arrays(self.config, self.params)


def _named_arrays(checkpoint: Checkpoint) -> List[tuple]:
    arrays = list(checkpoint.params.items())
    if checkpoint.optimizer is not None:
        arrays += [(FIRST_MOMENT_PREFIX + name, value) for name, value in checkpoint.optimizer.first_moment.items()]
        arrays += [(SECOND_MOMENT_PREFIX + name, value) for name, value in checkpoint.optimizer.second_moment.items()]
    return arrays


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name, value in _named_arrays(checkpoint):
        payload = np.ascontiguousarray(value, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(value)), "offset": offset})
        chunks.append(payload)
        offset += len(payload)

    optimizer = None
    if checkpoint.optimizer is not None:
        state = checkpoint.optimizer
        optimizer = {"learning_rate": state.learning_rate, "beta1": state.beta1, "beta2": state.beta2,
                     "epsilon": state.epsilon, "step_count": state.step_count}
    header = {
        "format_version": checkpoint.format_version,
        "config": plain_data(checkpoint.config),
        "metadata": plain_data(checkpoint.metadata),
        "optimizer": optimizer,
        "arrays": index,
    }
    header_bytes = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(f"{len(header_bytes)}\n".encode("ascii"))
        f.write(header_bytes)
        f.write(b"\n")
        for chunk in chunks:
            f.write(chunk)
    logger.debug("Wrote checkpoint %s (%d arrays, %d payload bytes)", path, len(index), offset)
    return path


def _read_header(path: Path, data: bytes) -> tuple:
    if not data.startswith(MAGIC):
        raise CheckpointHeaderError(f"{path} is not a checkpoint (missing the {MAGIC.strip().decode()} line)")
    rest = data[len(MAGIC):]
    length_line, _, rest = rest.partition(b"\n")
    try:
        header_length = int(length_line)
    except ValueError:
        raise CheckpointHeaderError(f"{path}: header length line {length_line[:20]!r} is not an integer")
    if header_length < 0 or len(rest) < header_length + 1:
        raise CheckpointHeaderError(f"{path}: header of {header_length} bytes runs past the end of the file")
    try:
        header = json.loads(rest[:header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointHeaderError(f"{path}: header is not valid JSON ({e})")
    if not isinstance(header, dict):
        raise CheckpointHeaderError(f"{path}: header is not a JSON object")
    return header, rest[header_length + 1:]


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    header, payload = _read_header(path, path.read_bytes())

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    missing = [key for key in ("config", "metadata", "arrays") if key not in header]
    if missing:
        raise CheckpointHeaderError(f"{path}: header lacks {', '.join(missing)}")

    try:
        config = PolicyConfig(**header["config"])
    except (TypeError, ConfigError) as e:
        raise CheckpointHeaderError(f"{path}: stored policy config is invalid ({e})")

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointHeaderError(f"{path}: malformed array index entry {entry!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload ends before array {name} ({count} values at byte {offset}) is complete", name)
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)

    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = AdamState(**header["optimizer"])
        for name in list(arrays):
            if name.startswith(FIRST_MOMENT_PREFIX):
                optimizer.first_moment[name[len(FIRST_MOMENT_PREFIX):]] = arrays.pop(name)
            elif name.startswith(SECOND_MOMENT_PREFIX):
                optimizer.second_moment[name[len(SECOND_MOMENT_PREFIX):]] = arrays.pop(name)

    return Checkpoint(config=config, params=arrays, optimizer=optimizer,
                      metadata=header["metadata"], format_version=version)
