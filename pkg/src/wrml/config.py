"""Experiment configuration (YAML) and named seed streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import ConfigError
from .flowsim import FlowConfig
from .grf import CovarianceSpec, Grid2D
from .smoother import LMSchedule
from .transforms import TransformKind


def derive_seed(master: int, name: str) -> int:
    """Seed of the named stream: ``SeedSequence(master, spawn_key=(crc32(name),))``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class GridConfig:
    n: int = 21
    length: float = 2.0

    def build(self) -> Grid2D:
        return Grid2D.square(self.n, self.length)


@dataclass
class CovarianceConfig:
    sigma: float = 0.8
    rho: float = 1.1

    def build(self) -> CovarianceSpec:
        return CovarianceSpec(self.sigma, self.rho)


@dataclass
class FlowSection:
    dt: float = 0.5
    porosity: float = 0.2
    total_rate: float = 0.027
    injector_layout: str = "quadrants"
    max_substeps: int = 1000


@dataclass
class ObservationConfig:
    noise_std: float = 0.02
    interval: float = 1.0
    history_end: float = 60.0
    forecast_time: float = 70.0

    def history_times(self) -> list[float]:
        n = int(round(self.history_end / self.interval))
        return [self.interval * (k + 1) for k in range(n)]


@dataclass
class SmootherConfig:
    modes: list = field(default_factory=lambda: ["ies", "hybrid"])
    gamma: float = 5.0
    lambda0: Optional[float] = None
    max_iter: int = 50
    rel_tol: float = 0.01
    n_small: int = 2
    max_rejections: int = 5
    precision: str = "auto"

    def schedule(self) -> LMSchedule:
        return LMSchedule(self.gamma, self.lambda0, self.max_iter, self.rel_tol,
                          self.n_small, self.max_rejections)


@dataclass
class WeightsConfig:
    full_formula: bool = False
    ies_precision: str = "auto"


@dataclass
class DenoiseConfig:
    sigma_o: Optional[float] = None
    replicates: int = 0
    replicate_size: int = 50
    sigma_pr: float = 13.0
    nu: float = 3.0
    omega_pr: Optional[float] = None
    tune: bool = False
    sigma_pr_grid: list = field(default_factory=lambda: [2.0, 4.0, 6.0, 9.0, 13.0, 20.0])
    nu_grid: list = field(default_factory=lambda: [2.0, 3.0, 4.0, 6.0])


@dataclass
class SweepConfig:
    exponents: list = field(default_factory=lambda: [round(0.05 * k, 2) for k in range(21)])


@dataclass
class LandscapeConfig:
    grid_res: int = 31
    extent: float = 0.5
    mode: str = "hybrid"


@dataclass
class ExperimentConfig:
    name: str = "desk"
    master_seed: int = 20240601
    transform: str = "non-monotonic"
    n_e: int = 100
    prior_mean: float = 0.0
    grid: GridConfig = field(default_factory=GridConfig)
    covariance: CovarianceConfig = field(default_factory=CovarianceConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    observations: ObservationConfig = field(default_factory=ObservationConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)

    def __post_init__(self):
        try:
            TransformKind.parse(self.transform)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_e < 2:
            raise ConfigError("n_e must be at least 2")
        if self.observations.noise_std < 0:
            raise ConfigError("observation noise std must be nonnegative")
        if self.observations.forecast_time <= self.observations.history_end:
            raise ConfigError("forecast_time must come after history_end")
        for m in self.smoother.modes:
            if m not in ("ies", "hybrid"):
                raise ConfigError(f"unknown smoother mode {m!r}")
        if not self.smoother.modes:
            raise ConfigError("at least one smoother mode is required")
        if any(not 0 <= e <= 1 for e in self.sweep.exponents):
            raise ConfigError("sweep exponents must lie in [0, 1]")

    # -- derived objects --------------------------------------------------
    def seed(self, name: str) -> int:
        return derive_seed(self.master_seed, name)

    def flow_config(self) -> FlowConfig:
        f = self.flow
        return FlowConfig(
            grid=self.grid.build(), porosity=f.porosity, dt=f.dt,
            t_end=self.observations.forecast_time, total_rate=f.total_rate,
            injector_layout=f.injector_layout, max_substeps=f.max_substeps,
        )

    @property
    def transform_kind(self) -> TransformKind:
        return TransformKind.parse(self.transform)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data or {}, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _build(cls, data: dict, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    c.__name__: c
    for c in (GridConfig, CovarianceConfig, FlowSection, ObservationConfig, SmootherConfig,
              WeightsConfig, DenoiseConfig, SweepConfig, LandscapeConfig)
}
