"""Diffusion-based correlated observation-error covariances and their scale-by-scale impact on 3D-Var."""
from .assimilation import (
    SelectionOperator,
    analysis_error_series,
    analysis_error_spectrum,
    minimize,
    run_experiment,
    simulate_innovation,
)
from .background import BackgroundCov, build_B
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .diffusion import DiffusionCorrelation, DiffusionOperator, assemble, compute_normalization
from .kernels import CirculantSpectrum, CorrelationModel, ar_correlation, ar_spectrum, circulant_eigenvalues
from .mesh import TrackMesh, build_track_mesh, partition, uniform_mesh
from .obs_cov import ObsErrorCov, build_R
from .spectral import (
    ScaleDecomposition,
    analysis_error_ratio,
    optimal_analysis_spectrum,
    sensitivity_spectrum,
    suboptimal_analysis_spectrum,
)

__version__ = "0.1.0"

__all__ = [
    "BackgroundCov",
    "CirculantSpectrum",
    "ConfigError",
    "CorrelationModel",
    "DiffusionCorrelation",
    "DiffusionOperator",
    "ExperimentConfig",
    "ObsErrorCov",
    "ScaleDecomposition",
    "SelectionOperator",
    "TrackMesh",
    "analysis_error_ratio",
    "analysis_error_series",
    "analysis_error_spectrum",
    "ar_correlation",
    "ar_spectrum",
    "assemble",
    "build_B",
    "build_R",
    "build_track_mesh",
    "circulant_eigenvalues",
    "compute_normalization",
    "load_config",
    "minimize",
    "optimal_analysis_spectrum",
    "parse_config",
    "partition",
    "run_experiment",
    "sensitivity_spectrum",
    "simulate_innovation",
    "suboptimal_analysis_spectrum",
    "uniform_mesh",
]
