"""Run configuration: nested dataclasses, presets, file loading and dotted overrides."""

from __future__ import annotations

import copy
import json
import sys
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .flow import FlowConfig
from .keyframes import SelectorConfig
from .model import ModelConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"  # relative paths resolve against the run directory
    cache: str = "cache"
    n_clips: int = 600
    frames_range: tuple[int, int] = (10, 40)
    fps: int = 30

    def __post_init__(self):
        self.frames_range = tuple(int(x) for x in self.frames_range)
        if self.n_clips < 1:
            raise ValueError(f"n_clips must be >= 1, got {self.n_clips}")
        lo, hi = self.frames_range if len(self.frames_range) == 2 else (0, -1)
        if not 8 <= lo <= hi <= 200:
            raise ValueError(f"frames_range must satisfy 8 <= min <= max <= 200, got {self.frames_range}")
        if self.fps < 1:
            raise ValueError("fps must be >= 1")


@dataclass
class SplitConfig:
    test_fraction: float = 1 / 6
    max_passes: int = 20

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.max_passes < 0:
            raise ValueError("max_passes must be >= 0")


@dataclass
class PreprocessConfig:
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)
    face_margin: float = 0.2

    def __post_init__(self):
        self.tile_grid = tuple(int(x) for x in self.tile_grid)
        if self.clip_limit <= 0 or len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ValueError("clip_limit must be positive and tile_grid two positive ints")
        if not 0 <= self.face_margin <= 1:
            raise ValueError("face_margin must be in [0, 1]")


@dataclass
class OptimConfig:
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 200
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 0:
            raise ValueError("scheduler_patience must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.selector.k != self.model.k:
            raise ValueError(f"selector.k ({self.selector.k}) and model.k ({self.model.k}) must match")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# Sized so the whole pipeline finishes within tens of minutes on one CPU core.
DESK_OVERRIDES = {
    "data": {"n_clips": 200},
    "split": {"test_fraction": 0.25},
    "selector": {"steps": 300},
    "model": {"channels": [8, 16, 32, 64, 128]},
    "optim": {"lr": 1e-3, "batch_size": 16, "epochs": 40},
}

PRESETS = {"paper": {}, "desk": DESK_OVERRIDES}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        args = typing.get_args(tp)
        elem = args[0] if args else int
        return tuple(_coerce(elem, v, key) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = prefix + name
        kwargs[name] = _build(tp, value, key + ".") if is_dataclass(tp) else _coerce(tp, value, key)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def parse_override(text: str) -> dict:
    """``"model.dropout=0.2"`` -> ``{"model": {"dropout": 0.2}}``; values parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        return tomllib.loads(text)
    if path.suffix == ".json":
        return json.loads(text)
    raise ConfigError(f"config file must be .toml or .json, got {path.name}")


def make_config(preset: str = "desk", file=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Preset, then config file, then ``--set`` overrides, then an explicit seed."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data = _merge(asdict(RunConfig()), PRESETS[preset])
    if file is not None:
        data = _merge(data, load_file(file))
    for text in overrides:
        data = _merge(data, parse_override(text))
    if seed is not None:
        data["seed"] = seed
    return _build(RunConfig, data)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)
