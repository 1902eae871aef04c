"""Run configuration: TOML file < command-line flags, unknown keys rejected.

Sections map to dataclasses::

    [model]   BackboneConfig      [train]  TrainConfig
    [infer]   InferenceConfig     [data]   DataConfig
    [report]  ReportConfig        [paths]  PathsConfig

The defaults of :class:`RunConfig` are the desk-scale setup (small network,
64x64 synthetic scenes); ``configs/full.toml`` holds the full-size values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomli

from .backbone import BackboneConfig
from .errors import ConfigError
from .inference import InferenceConfig
from .training import TrainConfig

DATA_ROOT_ENV = "DBCR_DATA_ROOT"


@dataclass
class DataConfig:
    count: int = 320                     # total scenes written by make-data
    ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])  # train/val/test
    seed: int = 0
    H: int = 64
    W: int = 64
    channels: int = 13
    terrain_octaves: int = 4
    cloud_opacity_range: list[float] = field(default_factory=lambda: [0.6, 1.0])
    coverage_range: list[float] = field(default_factory=lambda: [0.05, 0.95])  # per-scene target drawn uniformly
    sar_noise_level: float = 0.15
    workers: int = 1

    def validate(self):
        if self.count < 1:
            raise ConfigError("data.count must be >= 1 (refusing to write an empty dataset)")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            raise ConfigError("data.ratios must be three nonnegative numbers summing to 1")
        for name in ("H", "W"):
            v = getattr(self, name)
            if v < 16 or v & (v - 1):
                raise ConfigError(f"data.{name} must be a power of two >= 16")
        lo, hi = self.coverage_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("data.coverage_range must satisfy 0 <= lo <= hi <= 1")
        lo, hi = self.cloud_opacity_range
        if not 0.5 <= lo <= hi <= 1:
            raise ConfigError("data.cloud_opacity_range must satisfy 0.5 <= lo <= hi <= 1")
        if self.sar_noise_level < 0 or self.workers < 1 or self.channels < 1 or self.terrain_octaves < 1:
            raise ConfigError("data.sar_noise_level >= 0, data.workers/channels/terrain_octaves >= 1 required")


@dataclass
class ReportConfig:
    rgb_bands: list[int] = field(default_factory=lambda: [3, 2, 1])
    cloud_threshold: float = 0.6
    ssim_rgb_only: bool = False
    sweep_nfe: list[int] = field(default_factory=lambda: [1, 5, 10])
    mode_nfe: int = 5                    # ODE vs SDE comparison; at N=1 the two coincide

    def validate(self):
        if len(self.rgb_bands) != 3:
            raise ConfigError("report.rgb_bands must list three band indices")
        if not 0 <= self.cloud_threshold <= 1:
            raise ConfigError("report.cloud_threshold must be in [0, 1]")
        if not self.sweep_nfe or any(n < 1 for n in self.sweep_nfe):
            raise ConfigError("report.sweep_nfe must be a nonempty list of positive integers")
        if self.mode_nfe < 1:
            raise ConfigError("report.mode_nfe must be a positive integer")


@dataclass
class PathsConfig:
    data_dir: str = ""                   # default: $DBCR_DATA_ROOT or ./data
    run_dir: str = "runs/desk"
    out_dir: str = ""                    # default: <run_dir>/<command>

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir or os.environ.get(DATA_ROOT_ENV, "data"))


def desk_model() -> BackboneConfig:
    return BackboneConfig(widths=[16, 32, 64], enc_blocks=[1, 1, 2], dec_blocks=[1, 1, 1],
                          fusion_heads=[1, 2, 4], time_embed_dim=64)


def desk_train() -> TrainConfig:
    return TrainConfig(epochs=12, batch_size=4, learning_rate=1e-3, T=1000, seed=0)


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=desk_model)
    train: TrainConfig = field(default_factory=desk_train)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    data: DataConfig = field(default_factory=DataConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        try:
            self.model.validate()
            self.train.validate()
            self.infer.validate(self.train.T)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.data.validate()
        self.report.validate()
        if self.data.channels != self.model.opt_channels_in:
            raise ConfigError(f"data.channels={self.data.channels} but model.opt_channels_in="
                              f"{self.model.opt_channels_in}")
        if any(b >= self.model.opt_channels_in for b in self.report.rgb_bands):
            raise ConfigError("report.rgb_bands index exceeds the optical channel count")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _section_types(section: str) -> dict[str, Any]:
    cls = typing.get_type_hints(RunConfig)[section]
    return typing.get_type_hints(cls)


def _coerce(section: str, key: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    where = f"{section}.{key}"
    if origin is typing.Union:  # Optional[X]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(section, key, value, inner)
    if origin is list:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(section, key, v, args[0]) for v in value]
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot interpret {value!r} as {hint.__name__}") from None
    return value


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict[str, Any]]) -> RunConfig:
    for section, values in overrides.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        hints = _section_types(section)
        target = getattr(cfg, section)
        for key, value in values.items():
            if key not in hints:
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(target, key, _coerce(section, key, value, hints[key]))
    return cfg


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the TOML file, then ``overrides``; validated before return."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomli.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        apply_overrides(cfg, raw)
    if overrides:
        apply_overrides(cfg, overrides)
    # dataclass __post_init__ normalization is bypassed by setattr; redo it
    try:
        cfg.model.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg.validate()


def field_specs():
    """(section, key, type hint, default) for every config field, for CLI generation."""
    cfg = RunConfig()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        hints = _section_types(section)
        for f in dataclasses.fields(obj):
            yield section, f.name, hints[f.name], getattr(obj, f.name)
