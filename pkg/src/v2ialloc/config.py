"""Run configuration: one YAML file holding every tunable of a run.

Sections mirror the library dataclasses (``scenario``, ``channel``,
``env``, ``hppo``) plus a ``run`` block for command-level settings.
Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agents import HPPOConfig
from .channel import ChannelParams
from .env import EnvConfig
from .scenario import ScenarioConfig

POLICY_NAMES = ("random", "max_rate", "max_features", "hppo")


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    command: str = "eval"
    seeds: list[int] = field(default_factory=list)  # empty: the command's default pool
    episodes: int | None = None  # eval/sweep: number of test seeds; train: episodes
    output_dir: str = "runs"
    policy: str = "all"  # one of POLICY_NAMES or "all"
    checkpoint: str = ""
    run_id: str = "run"
    sweep_axis: str = "bandwidth"
    valid_every: int = 100

    def validate(self) -> None:
        if self.policy != "all" and self.policy not in POLICY_NAMES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.sweep_axis not in ("bandwidth", "period"):
            raise ConfigError(f"unknown sweep axis {self.sweep_axis!r}")
        if self.episodes is not None and self.episodes < 0:
            raise ConfigError("episodes must be >= 0")


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    env: EnvConfig = field(default_factory=EnvConfig)
    hppo: HPPOConfig = field(default_factory=HPPOConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> None:
        if self.scenario.n_cavs != self.env.n_cavs:
            raise ConfigError("scenario.n_cavs and env.n_cavs differ")
        for section in (self.scenario, self.channel, self.env, self.hppo, self.run):
            try:
                section.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def policies(self) -> list[str]:
        return list(POLICY_NAMES) if self.run.policy == "all" else [self.run.policy]


SECTIONS = {
    "scenario": ScenarioConfig,
    "channel": ChannelParams,
    "env": EnvConfig,
    "hppo": HPPOConfig,
    "run": RunSettings,
}

_HEADER = """\
# v2ialloc run configuration (schema 1)
# Units: distances in meters, speeds in km/h, powers in dBm, bandwidth in Hz,
# times in milliseconds. Every key is optional; missing keys take defaults.
"""

_COMMENTS = {
    "scenario": "synthetic intersection world and sensing surrogate",
    "channel": "V2I uplink: path loss, fading, RBs and power levels",
    "env": "timing hierarchy, feature size C x Q and reward weights",
    "hppo": "hierarchical PPO agent",
    "run": "command-level settings",
}


def _coerce(value, annotation):
    """Convert YAML scalars/lists back into the dataclass field's type."""
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if value is None:
        return None
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0])
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0]) for v in value)
        if args and len(args) != len(value):
            raise ConfigError(f"expected {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a) for v, a in zip(value, args or [float] * len(value)))
    if origin is list:
        elem = args[0] if args else int
        return [_coerce(v, elem) for v in value]
    if annotation is float:
        return float(value)
    if annotation is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"expected an integer, got {value}")
        return int(value)
    if annotation is str:
        return str(value)
    return value


def _build(cls, data: dict | None):
    data = data or {}
    hints = typing.get_type_hints(cls)
    unknown = set(data) - set(hints)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k]) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = RunConfig(**{name: _build(cls, data.get(name)) for name, cls in SECTIONS.items()})
    cfg.validate()
    return cfg


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return {name: {f.name: _plain(getattr(getattr(cfg, name), f.name))
                   for f in dataclasses.fields(SECTIONS[name])}
            for name in SECTIONS}


def dump_config(cfg: RunConfig) -> str:
    parts = [_HEADER]
    for name, body in config_to_dict(cfg).items():
        parts.append(f"\n# {_COMMENTS[name]}\n")
        parts.append(yaml.safe_dump({name: body}, sort_keys=False, default_flow_style=False))
    return "".join(parts)


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data or {})


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
