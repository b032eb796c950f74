"""Run configuration: one INI file with map, sim, reward, train and eval sections."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .geometry import MapGraph, load_map
from .reward import HLRewardConfig, LLRewardConfig
from .sim import SimConfig
from .training import EnvSpec, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MapConfig:
    source: str = "builtin:stadium"
    n_lanes: int = 2
    lane_width: float = 0.3
    straight_length: float = 2.0
    curve_radius: float = 1.0
    lanelet_length: float = 0.25

    def build(self) -> MapGraph:
        params = {k: v for k, v in asdict(self).items() if k != "source"}
        return load_map(self.source, **params)


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    steps: int = 2000
    consistency_window: int = 10
    thresholds: tuple[float, ...] = (2.0, 1.5, 1.0, 0.5)


@dataclass(frozen=True)
class RunConfig:
    map: MapConfig = field(default_factory=MapConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    reward_high: HLRewardConfig = field(default_factory=HLRewardConfig)
    reward_low: LLRewardConfig = field(default_factory=LLRewardConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def env(self) -> EnvSpec:
        return EnvSpec(self.map.build(), self.sim, self.reward_high, self.reward_low, self.train.ref_spacing)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, sim=replace(self.sim, seed=seed), train=replace(self.train, seed=seed))


_SECTIONS = {
    "map": MapConfig,
    "sim": SimConfig,
    "reward_high": HLRewardConfig,
    "reward_low": LLRewardConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _parse(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return raw.strip()


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def load_config(path=None) -> RunConfig:
    """Read an INI run configuration; missing keys keep their defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    updates = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        current = getattr(cfg, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[key] = _parse(raw, known[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
        try:
            updates[section] = replace(current, **values)
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return replace(cfg, **updates)


def save_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for name in _SECTIONS:
        parser[name] = {k: _format(v) for k, v in asdict(getattr(cfg, name)).items()}
    with open(path, "w") as fh:
        fh.write(f"# content hash {cfg.content_hash()}\n")
        parser.write(fh)
