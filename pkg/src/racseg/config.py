"""YAML run configuration with strict keys.

A run file has up to four sections::

    scene:    SceneConfig fields (palette excluded)
    dataset:  n_train, n_test, clicks_per_thing, click_seed
    train:    TrainConfig fields except ``augment``
    augment:  methods, rng_seed, and nested pointwolf / affine / noise ranges

Missing keys keep their defaults.  Unknown keys raise :class:`ConfigError`
naming the full dotted key.  :func:`dump_config` writes every field, so
``dump(parse(dump(c))) == dump(c)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentationSpec
from .synthdata import ClickScheme, SceneConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "DatasetSpec", "RunConfig", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 20
    n_test: int = 5
    clicks_per_thing: int = 1
    click_seed: int = 0

    def scheme(self) -> ClickScheme:
        return ClickScheme(self.clicks_per_thing, self.click_seed)

    def validate(self):
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("dataset needs n_train >= 1 and n_test >= 0")
        if self.clicks_per_thing < 1:
            raise ConfigError("dataset.clicks_per_thing must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        try:
            self.scene.validate()
            self.dataset.validate()
            self.train.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


# fields that are not part of the text format
_SKIP = {SceneConfig: {"palette"}, TrainConfig: {"augment"}}


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value.strip().lower() in ("inf", ".inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default and len(value) != len(default) and not isinstance(default[0], str):
            raise ConfigError(f"{key}: expected {len(default)} values, got {len(value)}")
        proto = default[0] if default else None
        if proto is None or isinstance(proto, str):
            return tuple(value)
        return tuple(_coerce(v, proto, f"{key}[{i}]") for i, v in enumerate(value))
    # optional fields default to None: accept null, an integer or a list of integers
    if value is None or (isinstance(value, int) and not isinstance(value, bool)):
        return value
    if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return tuple(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _build(cls, data, prefix):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    proto = cls()
    skip = _SKIP.get(cls, set())
    names = [f.name for f in dataclasses.fields(cls) if f.name not in skip]
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {prefix}.{key!s}")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        default = getattr(proto, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), data[name], f"{prefix}.{name}")
        else:
            kwargs[name] = _coerce(data[name], default, f"{prefix}.{name}")
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    """Parse and validate YAML run-configuration text."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("run configuration must be a mapping of sections")
    sections = ("scene", "dataset", "train", "augment")
    for key in data:
        if key not in sections:
            raise ConfigError(f"unknown key {key!s}")
    scene = _build(SceneConfig, data.get("scene"), "scene")
    dataset = _build(DatasetSpec, data.get("dataset"), "dataset")
    augment = _build(AugmentationSpec, data.get("augment"), "augment")
    train = _build(TrainConfig, data.get("train"), "train")
    train = dataclasses.replace(train, augment=augment)
    return RunConfig(scene, dataset, train).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def _plain(obj, skip=()):
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _plain(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, float) and math.isinf(v):
            v = "inf"
        out[f.name] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    """Canonical YAML with every field spelled out, in declaration order."""
    doc = {
        "scene": _plain(cfg.scene, _SKIP[SceneConfig]),
        "dataset": _plain(cfg.dataset),
        "train": _plain(cfg.train, _SKIP[TrainConfig]),
        "augment": _plain(cfg.train.augment),
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)
