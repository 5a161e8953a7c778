"""Experiment configuration read from INI files, with field-level validation."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .kernels import CorrelationModel

__all__ = [
    "ConfigError",
    "GridConfig",
    "CovConfig",
    "ObsLayoutConfig",
    "SolverConfig",
    "NormalizeConfig",
    "KernelConfig",
    "RatioSurfaceConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _fail_if(cond, field_name, message):
    if cond:
        raise ConfigError(field_name, message)


@dataclass(frozen=True)
class GridConfig:
    n: int = 400
    h_km: float = 25.0

    def validate(self):
        _fail_if(self.n < 2, "grid.n", f"must be >= 2, got {self.n}")
        _fail_if(not self.h_km > 0, "grid.h_km", f"must be > 0, got {self.h_km}")


@dataclass(frozen=True)
class CovConfig:
    """Variance and AR correlation parameters; ``diagonal`` drops the correlation."""

    sigma: float = 1.0
    m: int = 2
    rho_km: float = 100.0
    diagonal: bool = False

    def validate(self, section, need_even=False):
        _fail_if(not self.sigma > 0, f"{section}.sigma", f"must be > 0, got {self.sigma}")
        if self.diagonal:
            return
        _fail_if(self.m < 1, f"{section}.m", f"must be >= 1, got {self.m}")
        _fail_if(not self.rho_km > 0, f"{section}.rho_km", f"must be > 0, got {self.rho_km}")
        _fail_if(
            need_even and self.m % 2 == 1,
            f"{section}.m",
            f"must be even for a diffusion-based covariance, got {self.m}",
        )

    @property
    def model(self):
        return None if self.diagonal else CorrelationModel(self.m, self.rho_km)


@dataclass(frozen=True)
class ObsLayoutConfig:
    mode: str = "every"
    stride: int = 1
    offset: int = 0
    file: str | None = None

    def validate(self):
        _fail_if(self.mode not in ("every", "stride", "file"), "obs.mode", f"unknown mode {self.mode!r}")
        _fail_if(self.stride < 1, "obs.stride", f"must be >= 1, got {self.stride}")
        _fail_if(self.offset < 0, "obs.offset", f"must be >= 0, got {self.offset}")
        _fail_if(self.mode == "file" and not self.file, "obs.file", "required when mode = file")


@dataclass(frozen=True)
class SolverConfig:
    tol_orders: float = 10.0
    max_iter: int = 500

    def validate(self):
        _fail_if(not self.tol_orders > 0, "solver.tol_orders", "must be > 0")
        _fail_if(self.max_iter < 1, "solver.max_iter", "must be >= 1")


@dataclass(frozen=True)
class NormalizeConfig:
    method: str = "spaced"
    spacing_factor: float = 5.0
    target_tol: float = 1e-2

    def validate(self):
        _fail_if(self.method not in ("spaced", "exact"), "normalize.method", f"unknown method {self.method!r}")
        _fail_if(not self.spacing_factor > 0, "normalize.spacing_factor", "must be > 0")
        _fail_if(not 0 < self.target_tol < 1, "normalize.target_tol", "must lie in (0, 1)")


@dataclass(frozen=True)
class KernelConfig:
    m_values: tuple = (1, 2, 4, 10)
    rho_values: tuple = (450.0,)
    r_max_km: float = 3000.0
    n_points: int = 301
    k_max: float = 0.02

    def validate(self):
        for m in self.m_values:
            _fail_if(m < 1, "kernel.m_values", f"entries must be >= 1, got {m}")
        for rho in self.rho_values:
            _fail_if(not rho > 0, "kernel.rho_values", f"entries must be > 0, got {rho}")
        _fail_if(not self.r_max_km > 0, "kernel.r_max_km", "must be > 0")
        _fail_if(self.n_points < 2, "kernel.n_points", "must be >= 2")
        _fail_if(not self.k_max > 0, "kernel.k_max", "must be > 0")


@dataclass(frozen=True)
class RatioSurfaceConfig:
    n_oo: int = 200
    n_ob: int = 200
    eta_oo_min: float = 1e-2
    eta_oo_max: float = 1e2
    eta_ob_min: float = 1e-4
    eta_ob_max: float = 1e4

    def validate(self):
        _fail_if(self.n_oo < 1 or self.n_ob < 1, "ratio_surface.n_oo", "grid sizes must be >= 1")
        _fail_if(not 0 < self.eta_oo_min <= self.eta_oo_max, "ratio_surface.eta_oo_min", "need 0 < min <= max")
        _fail_if(not 0 < self.eta_ob_min <= self.eta_ob_max, "ratio_surface.eta_ob_min", "need 0 < min <= max")

    def grids(self):
        return (
            np.logspace(np.log10(self.eta_oo_min), np.log10(self.eta_oo_max), self.n_oo),
            np.logspace(np.log10(self.eta_ob_min), np.log10(self.eta_ob_max), self.n_ob),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    background: CovConfig = field(default_factory=lambda: CovConfig(sigma=1.0, m=10, rho_km=250.0))
    truth: CovConfig = field(default_factory=CovConfig)
    specified: CovConfig = field(default_factory=CovConfig)
    obs: ObsLayoutConfig = field(default_factory=ObsLayoutConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    normalize: NormalizeConfig = field(default_factory=NormalizeConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    ratio_surface: RatioSurfaceConfig = field(default_factory=RatioSurfaceConfig)
    replicates: int = 10
    seed: int = 0
    batch_size: int = 256

    def validate(self):
        self.grid.validate()
        self.background.validate("background")
        # observation-error covariances are built with the diffusion operator
        self.truth.validate("truth", need_even=True)
        self.specified.validate("specified", need_even=True)
        self.obs.validate()
        self.solver.validate()
        self.normalize.validate()
        self.kernel.validate()
        self.ratio_surface.validate()
        _fail_if(self.replicates < 0, "experiment.replicates", f"must be >= 0, got {self.replicates}")
        _fail_if(self.seed < 0, "experiment.seed", f"must be >= 0, got {self.seed}")
        _fail_if(self.batch_size < 1, "experiment.batch_size", "must be >= 1")
        return self

    def with_seed(self, seed):
        return replace(self, seed=int(seed)).validate()

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "grid": GridConfig,
    "background": CovConfig,
    "truth": CovConfig,
    "specified": CovConfig,
    "obs": ObsLayoutConfig,
    "solver": SolverConfig,
    "normalize": NormalizeConfig,
    "kernel": KernelConfig,
    "ratio_surface": RatioSurfaceConfig,
}
_EXPERIMENT_KEYS = {"replicates": int, "seed": int, "batch_size": int}


def _convert(section, key, raw, default):
    name = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.replace(",", " ").split()]
            cast = int if default and isinstance(default[0], int) else float
            return tuple(cast(s) for s in items)
    except (KeyError, ValueError):
        raise ConfigError(name, f"cannot parse {raw!r}") from None
    return raw.strip() or None


def parse_config(text, base=None):
    """Parse INI text into a validated :class:`ExperimentConfig`.

    Missing sections and keys keep their defaults; unknown ones are errors.
    """
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    cfg = base or ExperimentConfig()
    updates = {}
    for section in parser.sections():
        if section == "experiment":
            values = {}
            for key, raw in parser.items(section):
                if key not in _EXPERIMENT_KEYS:
                    raise ConfigError(f"experiment.{key}", "unknown key")
                values[key] = _convert(section, key, raw, 0)
            updates.update(values)
            continue
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        current = getattr(cfg, section)
        values = {}
        for key, raw in parser.items(section):
            if not hasattr(current, key):
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[key] = _convert(section, key, raw, getattr(current, key))
        updates[section] = replace(current, **values)
    return replace(cfg, **updates).validate()


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
