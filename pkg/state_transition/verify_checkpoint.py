from pathlib import Path

import numpy as np
import pytest

from state_transition.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from state_transition.errors import CheckpointHeaderError, CheckpointTruncatedError, CheckpointVersionError
from state_transition.optim import AdamState, adam_step
from state_transition.policy import Policy, Variant, forward_policy
from state_transition.verify_policy import micro_config, random_observations, random_policy


def saved_checkpoint(tmp_path: Path, with_optimizer: bool = False) -> Path:
    policy = random_policy(micro_config(Variant.STANDARD_XATTN), seed=4)
    optimizer = None
    if with_optimizer:
        arrays = {name: value.copy() for name, value in policy.arrays().items()}
        grads = {name: np.ones_like(value) for name, value in arrays.items()}
        _, optimizer = adam_step(arrays, grads, AdamState())
    checkpoint = Checkpoint.from_policy(policy, optimizer, epoch=3, seed=11, dataset="abc123")
    return save_checkpoint(tmp_path / "policy.ckpt", checkpoint)


class VerifyRoundTrip:
    def verify_parameters_bitwise_equal(self, tmp_path: Path) -> None:
        policy = random_policy(micro_config(), seed=2)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "a.ckpt", Checkpoint.from_policy(policy)))
        assert loaded.config == policy.config
        for name, value in policy.arrays().items():
            assert np.array_equal(loaded.params[name], value)
            assert loaded.params[name].dtype == np.float64

    def verify_save_load_save_identical_bytes(self, tmp_path: Path) -> None:
        first = saved_checkpoint(tmp_path, with_optimizer=True)
        second = save_checkpoint(tmp_path / "again.ckpt", load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def verify_metadata_and_optimizer_survive(self, tmp_path: Path) -> None:
        loaded = load_checkpoint(saved_checkpoint(tmp_path, with_optimizer=True))
        assert loaded.metadata == {"epoch": 3, "seed": 11, "dataset": "abc123"}
        assert loaded.optimizer.step_count == 1
        assert set(loaded.optimizer.first_moment) == set(loaded.params)
        assert loaded.config.variant == Variant.STANDARD_XATTN

    def verify_loaded_policy_acts_identically(self, tmp_path: Path) -> None:
        policy = random_policy(micro_config(), seed=6)
        observations = random_observations(policy.config, 3)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "p.ckpt", Checkpoint.from_policy(policy))).policy()
        assert isinstance(loaded, Policy)
        assert np.array_equal(forward_policy(loaded, observations), forward_policy(policy, observations))


class VerifyCorruption:
    def verify_truncated_payload_names_array(self, tmp_path: Path) -> None:
        path = saved_checkpoint(tmp_path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointTruncatedError, match="head.b2") as info:
            load_checkpoint(path)
        assert info.value.array_name == "head.b2"

    def verify_unknown_version(self, tmp_path: Path) -> None:
        path = saved_checkpoint(tmp_path)
        data = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9')
        path.write_bytes(data)
        with pytest.raises(CheckpointVersionError, match="9"):
            load_checkpoint(path)

    def verify_not_a_checkpoint(self, tmp_path: Path) -> None:
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello\n")
        with pytest.raises(CheckpointHeaderError, match="not a checkpoint"):
            load_checkpoint(path)

    def verify_garbled_header(self, tmp_path: Path) -> None:
        path = saved_checkpoint(tmp_path)
        data = path.read_bytes()
        start = data.index(b"{")
        path.write_bytes(data[:start] + b"#" + data[start + 1:])
        with pytest.raises(CheckpointHeaderError, match="JSON"):
            load_checkpoint(path)
