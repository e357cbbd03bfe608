"""Experiment configuration: one JSON file, strict keys, dotted overrides, stable hash."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .emitter import StackConfig
from .model import ConfigError, ModelConfig, config_digest
from .training import TrainConfig


@dataclass
class DataConfig:
    n: int = 630
    pos_ratio: float = 401 / 630
    separation: float = 6.0
    patients: int = 210
    seed: int = 0
    feat_dim: int = 32


@dataclass
class CVConfig:
    k: int = 5
    seed: int = 0
    parallel_folds: bool = False


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    cv: CVConfig = field(default_factory=CVConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "cv": CVConfig}


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected a table, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = dict(payload)
    if cls is ModelConfig and "stack" in kwargs:
        kwargs["stack"] = _build(StackConfig, kwargs["stack"], f"{where}.stack")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def from_dict(payload: dict) -> ExperimentConfig:
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}")
    return ExperimentConfig(**{k: _build(cls, payload.get(k, {}), k)
                               for k, cls in _SECTIONS.items()})


def load_config(path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return from_dict(payload)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` (or ``model.stack.key=value``) overrides."""
    payload = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path = key.strip().split(".")
        node = payload
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: no section {part!r}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[path[-1]] = _parse_value(raw)
    return from_dict(payload)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
