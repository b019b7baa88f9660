"""Galerkin-truncated fractional cubic NLS on the circle: spectral simulator
and Monte Carlo laboratory for its Gaussian and Gibbs measures."""
from .spectral import (
    DimensionError,
    GridField,
    ModelParams,
    SpectralState,
    hamiltonian,
    mass,
    quartic_integral,
    sobolev_norm,
)
from .dynamics import IntegratorConfig, IntegrationError, TrajectoryLog, evolve
from .measures import MeasureConfig, SamplingError, WeightedSample, sample_gibbs

__all__ = [
    "DimensionError", "GridField", "ModelParams", "SpectralState", "hamiltonian", "mass",
    "quartic_integral", "sobolev_norm", "IntegratorConfig", "IntegrationError",
    "TrajectoryLog", "evolve", "MeasureConfig", "SamplingError", "WeightedSample",
    "sample_gibbs",
]
__version__ = "0.1.0"
