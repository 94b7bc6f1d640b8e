"""
Run configuration: one YAML file whose top-level keys are the sections below. Missing
sections and keys take their defaults; unknown keys are rejected. See docs/config.md.
"""
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from shared_utils import did_you_mean, plain_data
from state_transition.analysis import BenchConfig
from state_transition.errors import ConfigError
from state_transition.evaluation import EvalConfig
from state_transition.grid_env import EnvConfig, NoiseConfig
from state_transition.policy import PolicyConfig
from state_transition.training import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.yaml"
CONFIG_FORMAT_VERSION = 1

# Policy fields that must agree with the environment; taken from it unless set explicitly
ENV_DERIVED = ("obs_grid", "proprio_dim", "n_joints")


@dataclass
class DataConfig:
    episodes: int = 1000
    noise_on: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        if self.episodes < 0:
            raise ConfigError(f"episodes must be non-negative, got {self.episodes}", field="episodes", bound=">= 0")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}", field="workers", bound=">= 1")


@dataclass
class RunConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    data: DataConfig = field(default_factory=DataConfig)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _key_lines(text: str) -> Dict[str, int]:
    "1-based line of every section and dotted section.key in the document"
    lines: Dict[str, int] = {}
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        lines[str(key_node.value)] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for inner_key, _ in value_node.value:
                lines[f"{key_node.value}.{inner_key.value}"] = inner_key.start_mark.line + 1
    return lines


def _coerce(value: Any, hint: Any) -> Any:
    "YAML ints where floats are expected become floats; everything else is checked by the section itself"
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build_section(name: str, values: Any, lines: Dict[str, int]) -> Any:
    factory = SECTIONS[name]
    if values is None:
        return factory()
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(values).__name__}",
                          field=name, line=lines.get(name))

    cls = type(factory())
    hints = typing.get_type_hints(cls)
    known = [f.name for f in dataclasses.fields(cls)]
    for key in values:
        if key not in known:
            dotted = f"{name}.{key}"
            raise ConfigError(f"Unknown key '{dotted}'{did_you_mean(str(key), known)}",
                              field=dotted, line=lines.get(dotted))

    kwargs = {key: _coerce(value, hints.get(key)) for key, value in values.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        dotted = f"{name}.{e.field}" if e.field else name
        raise ConfigError(f"{dotted}: {e}", field=dotted, bound=e.bound,
                          line=lines.get(dotted, lines.get(name))) from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Section '{name}' has a value of the wrong type: {e}",
                          field=name, line=lines.get(name)) from e


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        document = yaml.safe_load(text)
        lines = _key_lines(text) if document else {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        where = f" at line {line}" if line is not None else ""
        raise ConfigError(f"{source}: could not parse YAML{where}: {getattr(e, 'problem', e)}", line=line) from e

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError(f"{source}: the top level must be a mapping of sections")
    document = dict(document)
    version = document.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"{source}: format_version {version!r} is not supported", field="format_version",
                          line=lines.get("format_version"))
    for name in document:
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section '{name}'{did_you_mean(str(name), SECTIONS)}",
                              field=str(name), line=lines.get(str(name)))

    env = _build_section("env", document.get("env"), lines)
    policy_values = dict(document.get("policy") or {})
    for key, value in (("obs_grid", list(env.obs_shape)), ("proprio_dim", env.proprio_dim),
                       ("n_joints", env.n_joints)):
        policy_values.setdefault(key, value)
    policy = _build_section("policy", policy_values, lines)
    config = RunConfig(
        policy=policy,
        train=_build_section("train", document.get("train"), lines),
        env=env,
        noise=_build_section("noise", document.get("noise"), lines),
        eval=_build_section("eval", document.get("eval"), lines),
        bench=_build_section("bench", document.get("bench"), lines),
        data=_build_section("data", document.get("data"), lines),
    )
    check_consistency(config, lines)
    return config


def check_consistency(config: RunConfig, lines: Optional[Dict[str, int]] = None) -> None:
    "Cross-section constraints that no single section can check"
    lines = lines or {}
    expected = {"obs_grid": config.env.obs_shape, "proprio_dim": config.env.proprio_dim,
                "n_joints": config.env.n_joints}
    for key in ENV_DERIVED:
        if getattr(config.policy, key) != expected[key]:
            raise ConfigError(f"policy.{key} = {getattr(config.policy, key)} disagrees with the environment, "
                              f"which gives {expected[key]}", field=f"policy.{key}", bound=str(expected[key]),
                              line=lines.get(f"policy.{key}"))


def load_config(path: Optional[Path]) -> RunConfig:
    "The defaults when path is None"
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"Could not read config file {path}: {e}") from e
    return parse_config(text, source=str(path))


def dump_config(config: RunConfig) -> str:
    document = {"format_version": CONFIG_FORMAT_VERSION}
    document.update({name: plain_data(getattr(config, name)) for name in SECTIONS})
    return yaml.safe_dump(document, sort_keys=False, default_flow_style=None)


def write_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    path = Path(out_dir) / RESOLVED_CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config))
    logger.info("Wrote %s", path)
    return path


def apply_overrides(config: RunConfig, overrides: Tuple[str, ...]) -> RunConfig:
    "section.key=value overrides from the command line, values parsed as YAML scalars"
    if not overrides:
        return config
    document: Dict[str, Dict[str, Any]] = yaml.safe_load(dump_config(config))
    for override in overrides:
        dotted, sep, raw = override.partition("=")
        section, _, key = dotted.partition(".")
        if not sep or not key:
            raise ConfigError(f"Override '{override}' is not of the form section.key=value", field=dotted)
        if section not in SECTIONS:
            raise ConfigError(f"Unknown section '{section}'{did_you_mean(section, SECTIONS)}", field=dotted)
        document[section][key] = yaml.safe_load(raw)
    # Environment-derived policy fields follow an overridden environment
    if any(o.startswith("env.") for o in overrides) and not any(o.startswith(f"policy.{k}") for o in overrides
                                                                for k in ENV_DERIVED):
        for key in ENV_DERIVED:
            document["policy"].pop(key, None)
    return parse_config(yaml.safe_dump(document, sort_keys=False), source="overrides")
