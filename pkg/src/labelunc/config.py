"""Run configuration: one YAML document, overridable from the command line."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .evalkit import DEFAULT_THRESHOLDS
from .labelvb import PriorSpec, VbConfig
from .losses import FIXED_LABEL_VARIANCES


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    labels: Optional[str] = None
    points: Optional[str] = None
    detections: Optional[str] = None
    output: str = "out"


@dataclass
class GridConfig:
    resolution: float = 0.1
    crop_margin: float = 0.1

    def __post_init__(self):
        if self.resolution <= 0:
            raise ConfigError("grid resolution must be positive")
        if self.crop_margin < 0:
            raise ConfigError("crop margin must be >= 0")


@dataclass
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    pair_threshold: float = 0.5
    distance_band: float = 10.0


@dataclass
class SynthConfig:
    scenes: int = 4
    objects_per_scene: int = 8
    distance: tuple = (5.0, 45.0)
    range_noise: float = 0.02
    angular_res_deg: float = 0.2
    noise_levels: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    noise_weights: tuple = (1.0, 1.0, 1.0, 1.0)


@dataclass
class SweepConfig:
    sigmas: tuple = (0.05, 0.2, 0.5)
    weights: tuple = (0.0, 1.0, 10.0)


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    vb: VbConfig = field(default_factory=VbConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    fixed_label_variances: tuple = FIXED_LABEL_VARIANCES
    seed: int = 0
    workers: int = 1

    @property
    def output(self) -> Path:
        return Path(self.paths.output)

    def require(self, *names: str) -> None:
        """Check that the named input paths are set and exist."""
        for n in names:
            p = getattr(self.paths, n)
            if p is None:
                raise ConfigError(f"paths.{n} is required for this command")
            if not Path(p).exists():
                raise ConfigError(f"paths.{n} does not exist: {p}")


_SECTIONS = {
    "paths": PathsConfig,
    "prior": PriorSpec,
    "vb": VbConfig,
    "grid": GridConfig,
    "eval": EvalConfig,
    "synth": SynthConfig,
    "sweep": SweepConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    top = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for k, v in data.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    cfg = RunConfig(**kwargs)
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    return config_from_dict(data or {})


def angular_res(cfg: RunConfig) -> float:
    return math.radians(cfg.synth.angular_res_deg)
