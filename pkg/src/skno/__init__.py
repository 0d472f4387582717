"""Spectral neural operators on a d+1 dimensional (space x auxiliary) domain."""
from .exceptions import NumericError, SknoError, SymmetryError, UsageError
from .model import ArchConfig, SknoModel, forward
from .adjoint import backward, grad_check, rel_l2_loss
from .estimator import SKNORegressor

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "SknoModel",
    "SKNORegressor",
    "forward",
    "backward",
    "grad_check",
    "rel_l2_loss",
    "SknoError",
    "UsageError",
    "NumericError",
    "SymmetryError",
]
