"""Flat key-value run configuration files (YAML mappings of scalars and lists)."""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import yaml

from .data.synth import SynthConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"vocab"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
SYNTH_KEYS = {f.name for f in fields(SynthConfig)} - {"templates"}


def read_flat(path: str | Path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    for k, v in data.items():
        if not isinstance(k, str):
            raise ConfigError(f"{path}: non-string key {k!r}")
        if isinstance(v, dict) or (isinstance(v, list) and any(isinstance(x, (dict, list)) for x in v)):
            raise ConfigError(f"{path}: key {k!r} must hold a scalar or a flat list")
    return data


def write_flat(d: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True, default_flow_style=None))


def check_keys(d: dict, allowed: set[str], what: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")


def split_run_config(d: dict, extra: set[str] = frozenset()) -> tuple[dict, dict, dict]:
    """Partition a flat mapping into (model kwargs, train kwargs, other)."""
    check_keys(d, MODEL_KEYS | TRAIN_KEYS | set(extra), "run config")
    model = {k: v for k, v in d.items() if k in MODEL_KEYS}
    train = {k: v for k, v in d.items() if k in TRAIN_KEYS}
    other = {k: v for k, v in d.items() if k in extra}
    return model, train, other


def make_train_config(d: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid training settings: {e}") from e


def make_synth_config(d: dict) -> SynthConfig:
    check_keys(d, SYNTH_KEYS, "dataset config")
    try:
        return SynthConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid dataset settings: {e}") from e
