"""Detection of Gaussian Markov random field patches hidden in white noise."""

from .errors import ConditioningError, ConfigError, DomainError, EmptyScanError, NoCrossingError, NumericalError
from .gmrf import ArParams, CovBuilder, PhiField, ar_to_gmrf, autocovariances, sigma_phi_sq, validate_phi
from .lattice import Lattice, Region, RegionClass, make_lattice

__version__ = "0.1.0"

__all__ = [
    "ArParams",
    "ConditioningError",
    "ConfigError",
    "CovBuilder",
    "DomainError",
    "EmptyScanError",
    "Lattice",
    "NoCrossingError",
    "NumericalError",
    "PhiField",
    "Region",
    "RegionClass",
    "ar_to_gmrf",
    "autocovariances",
    "make_lattice",
    "sigma_phi_sq",
    "validate_phi",
]
