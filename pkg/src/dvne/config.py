"""Run configuration: dataclass sections, TOML (de)serialization, validation, RNG streams.

An empty file yields every default.  Unknown keys, wrong types and violated
cross-field constraints raise :class:`ConfigError` naming the dotted key.
"""

from __future__ import annotations

import dataclasses
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .model import ModelConfig
from .optim import AdamConfig
from .rendering import RenderConfig

STAGES = ("reconstruct", "edit_foreground", "edit_background", "render")
STREAMS = ("init", "branch", "camera", "noise", "stratification", "pixels", "holdout", "zoom", "background")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Stage1Config:
    steps: int = 2000
    patch_size: int = 8
    patches_per_step: int = 4
    holdout_fraction: float = 0.1
    w_photometric: float = 1.0
    w_feature: float = 0.1
    w_distortion: float = 1e-3
    log_every: int = 50


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 1000
    resolution: tuple[int, int] = (128, 128)
    branch_probs: tuple[float, float, float] = (0.2, 0.4, 0.4)
    zoom_prob: float = 0.3
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    w_rgb: float = 5.0
    w_mask: float = 0.5
    w_depth: float = 0.01
    t_min: float = 0.02
    t_max: float = 0.98
    schedule_offset: float = 0.008
    skip_codec_jacobian: bool = False
    codec_factor: int = 1
    background: str = "random-gray"
    azimuth_deg: tuple[float, float] = (0.0, 360.0)
    elevation_deg: tuple[float, float] = (-10.0, 45.0)
    camera_radius: float = 2.6
    fov_deg: float = 45.0
    zoom_distance: float = 0.45
    base_prompt: str = "a person"
    mock_target: tuple[float, float, float] = (1.0, 0.0, 0.0)
    log_every: int = 50


@dataclass(frozen=True)
class Stage3Config:
    steps: int = 500
    resolution: tuple[int, int] = (64, 64)
    chunk: int = 1024
    w_nnfm: float = 1.0
    w_content: float = 0.5
    log_every: int = 25


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    checkpoint: str = ""
    reference: str = ""
    style: str = ""
    out: str = "runs/out"


@dataclass(frozen=True)
class RunConfig:
    stage: str = "reconstruct"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    paths: PathsConfig = field(default_factory=PathsConfig)


# -- conversion ----------------------------------------------------------------------------

def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(key, f"expected a table, got {type(value).__name__}")
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected an array, got {value!r}")
        args = typing.get_args(tp)
        if not args:
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(key, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    return value


def _build(cls, data, prefix=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{prefix}.{k}" if prefix else k, "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}.{k}" if prefix else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(prefix or "config", str(exc)) from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.stage not in STAGES:
        raise ConfigError("stage", f"must be one of {STAGES}")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed", "must fit in an unsigned 64-bit integer")
    probs = np.asarray(cfg.stage2.branch_probs)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigError("stage2.branch_probs",
                          f"must be non-negative and sum to 1, got {[float(p) for p in probs]}")
    if not 0.0 <= cfg.stage2.zoom_prob <= 1.0:
        raise ConfigError("stage2.zoom_prob", "must lie in [0, 1]")
    if not 0.0 < cfg.stage2.t_min < cfg.stage2.t_max < 1.0:
        raise ConfigError("stage2.t_min", "need 0 < t_min < t_max < 1")
    if cfg.stage2.background not in ("random-gray", "scene"):
        raise ConfigError("stage2.background", "must be 'random-gray' or 'scene'")
    if not 0.0 <= cfg.stage1.holdout_fraction < 1.0:
        raise ConfigError("stage1.holdout_fraction", "must lie in [0, 1)")
    if not 0.0 < cfg.render.near < cfg.render.far:
        raise ConfigError("render.near", "need 0 < near < far")
    if cfg.render.spacing not in ("linear", "disparity"):
        raise ConfigError("render.spacing", "must be 'linear' or 'disparity'")
    for key in ("stage2.resolution", "stage3.resolution"):
        section, name = key.split(".")
        if min(getattr(getattr(cfg, section), name)) <= 0:
            raise ConfigError(key, "must be positive")
    for key in ("stage1.steps", "stage2.steps", "stage3.steps"):
        section, name = key.split(".")
        if getattr(getattr(cfg, section), name) < 0:
            raise ConfigError(key, "must be non-negative")
    if cfg.stage3.chunk <= 0:
        raise ConfigError("stage3.chunk", "must be positive")
    if cfg.optim.lr <= 0:
        raise ConfigError("optim.lr", "must be positive")
    return cfg


def from_dict(data) -> RunConfig:
    return validate(_build(RunConfig, data))


def loads_config(text) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"malformed TOML ({exc})") from exc
    return from_dict(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return loads_config(text)


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(_plain(cfg))


def dump_config(cfg: RunConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_config(cfg))


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Replace dotted keys, e.g. ``override(cfg, **{"stage2.steps": 10})``."""
    data = _plain(cfg)
    for dotted, value in changes.items():
        node = data
        *head, last = dotted.split(".")
        for part in head:
            node = node[part]
        node[last] = _plain(value)
    return from_dict(data)


def stream(seed, name) -> np.random.Generator:
    """Independent generator for one named consumer of randomness."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
