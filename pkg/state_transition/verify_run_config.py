from pathlib import Path

import pytest

from state_transition.errors import ConfigError
from state_transition.evaluation import Regime
from state_transition.policy import Variant
from state_transition.run_config import (
    RESOLVED_CONFIG_FILE,
    RunConfig,
    apply_overrides,
    dump_config,
    load_config,
    parse_config,
    write_resolved_config,
)

DESK = """
policy:
  d_model: 64
  n_layers: 2
  n_heads: 2
train:
  epochs: 15
  learning_rate: 0.0001
env:
  grid_size: 12
data:
  episodes: 300
"""


class VerifyParse:
    def verify_empty_document_gives_defaults(self) -> None:
        assert parse_config("") == RunConfig()
        assert parse_config("# nothing here\n") == RunConfig()
        assert load_config(None) == RunConfig()

    def verify_sections_and_defaults(self) -> None:
        config = parse_config(DESK)
        assert config.policy.d_model == 64 and config.policy.n_layers == 2
        assert config.policy.k_max == RunConfig().policy.k_max
        assert config.train.epochs == 15 and config.data.episodes == 300
        assert config.eval.regime == Regime.MIXED

    def verify_policy_follows_environment(self) -> None:
        config = parse_config(DESK)
        assert config.policy.obs_grid == (1, 12, 12)
        assert config.policy.proprio_dim == config.env.proprio_dim
        assert config.policy.n_joints == config.env.n_joints

    def verify_ints_accepted_for_floats(self) -> None:
        config = parse_config("train:\n  learning_rate: 1\n")
        assert isinstance(config.train.learning_rate, float) and config.train.learning_rate == 1.0

    def verify_unknown_key(self) -> None:
        with pytest.raises(ConfigError, match="did you mean epochs") as e:
            parse_config("train:\n  batch_size: 4\n  epoch: 3\n")
        assert e.value.field == "train.epoch"
        assert e.value.line == 3

    def verify_unknown_section(self) -> None:
        with pytest.raises(ConfigError, match="did you mean train") as e:
            parse_config("policy:\n  d_model: 64\ntrian:\n  epochs: 2\n")
        assert e.value.line == 3

    def verify_out_of_range_names_field_and_line(self) -> None:
        with pytest.raises(ConfigError) as e:
            parse_config("env:\n  grid_size: 8\ntrain:\n  sequence_length: 1\n")
        assert e.value.field == "train.sequence_length"
        assert e.value.bound == ">= 4"
        assert e.value.line == 4

    def verify_short_sequences_allowed_without_masking(self) -> None:
        config = parse_config("train:\n  sequence_length: 1\n  mask_enabled: false\n")
        assert config.train.sequence_length == 1

    def verify_wrong_type(self) -> None:
        with pytest.raises(ConfigError) as e:
            parse_config("train:\n  epochs: many\n")
        assert e.value.field == "train"
        with pytest.raises(ConfigError, match="must be a mapping"):
            parse_config("train: 5\n")

    def verify_yaml_error_carries_line(self) -> None:
        with pytest.raises(ConfigError, match="could not parse YAML") as e:
            parse_config("train:\n  epochs: 3\n   batch_size: [1, 2\n")
        assert e.value.line is not None

    def verify_format_version(self) -> None:
        assert parse_config("format_version: 1\n") == RunConfig()
        with pytest.raises(ConfigError, match="format_version"):
            parse_config("format_version: 2\n")

    def verify_environment_mismatch(self) -> None:
        with pytest.raises(ConfigError, match="disagrees with the environment") as e:
            parse_config("env:\n  grid_size: 8\npolicy:\n  obs_grid: [1, 16, 16]\n")
        assert e.value.field == "policy.obs_grid"
        assert e.value.line == 4

    def verify_unreachable_separation(self) -> None:
        with pytest.raises(ConfigError, match="cannot be met") as e:
            parse_config("env:\n  min_separation: 25\n")
        assert e.value.field == "env.min_separation"
        assert e.value.line == 2

    def verify_no_history_forces_empty_window(self) -> None:
        config = parse_config("policy:\n  variant: no_history\n  k_max: 7\n")
        assert config.policy.variant == Variant.NO_HISTORY and config.policy.k_max == 0


class VerifyDump:
    def verify_dump_then_parse(self) -> None:
        config = parse_config(DESK)
        assert parse_config(dump_config(config)) == config
        assert parse_config(dump_config(RunConfig())) == RunConfig()

    def verify_resolved_file(self, tmp_path: Path) -> None:
        config = parse_config(DESK)
        path = write_resolved_config(config, tmp_path / "run")
        assert path.name == RESOLVED_CONFIG_FILE
        assert load_config(path) == config
        assert path.read_text().startswith("format_version: 1\n")

    def verify_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError, match="Could not read"):
            load_config(tmp_path / "absent.yaml")


class VerifyOverrides:
    def verify_values_parsed_as_yaml(self) -> None:
        config = apply_overrides(RunConfig(), ("train.epochs=3", "policy.variant=standard_xattn",
                                               "eval.masked_inference=true"))
        assert config.train.epochs == 3
        assert config.policy.variant == Variant.STANDARD_XATTN
        assert config.eval.masked_inference is True

    def verify_no_overrides_is_identity(self) -> None:
        config = parse_config(DESK)
        assert apply_overrides(config, ()) is config

    def verify_environment_override_moves_policy(self) -> None:
        config = apply_overrides(RunConfig(), ("env.grid_size=8",))
        assert config.env.grid_size == 8
        assert config.policy.obs_grid == (1, 8, 8)

    def verify_bad_overrides(self) -> None:
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides(RunConfig(), ("train.epochs",))
        with pytest.raises(ConfigError, match="did you mean train"):
            apply_overrides(RunConfig(), ("trian.epochs=3",))
        with pytest.raises(ConfigError, match="did you mean epochs"):
            apply_overrides(RunConfig(), ("train.epoch=3",))
        with pytest.raises(ConfigError) as e:
            apply_overrides(RunConfig(), ("train.sequence_length=2",))
        assert e.value.field == "train.sequence_length"


def verify_desk_preset() -> None:
    config = load_config(Path(__file__).parent.parent / "configs" / "desk.yaml")
    policy, train = config.policy, config.train
    assert (policy.d_model, policy.n_layers, policy.n_heads, policy.k_max) == (64, 2, 2, 15)
    assert (config.data.episodes, train.epochs, train.eval_episodes, train.eval_seeds) == (300, 15, 100, 3)
    assert config.eval.regime == Regime.OCCLUDED and config.data.noise_on
    # a straight run to the farthest object fits in the history window
    assert 2 * (config.env.grid_size - 1) <= policy.k_max + 1


@pytest.mark.parametrize("name", ["full", "desk", "micro"])
def verify_presets_parse(name: str) -> None:
    config = load_config(Path(__file__).parent.parent / "configs" / f"{name}.yaml")
    assert parse_config(dump_config(config)) == config
    assert config.policy.obs_grid == config.env.obs_shape
