"""LC-MuSE: locally monotone energy priors for MRI reconstruction.

The package provides a small autodiff tensor core, a convolutional energy
model with a guaranteed-monotone score, constrained score-matching training,
a SENSE-style MRI forward operator, a majorize-minimize reconstruction
solver, and empirical verification probes for the theoretical guarantees.
"""

from .exceptions import (
    ConfigError,
    ConvergenceWarning,
    GradientWarning,
    NumericalError,
    ReportIntegrityError,
    ShapeError,
)
from .tensor import Tensor, grad, no_grad

__all__ = [
    "Tensor",
    "grad",
    "no_grad",
    "ShapeError",
    "ConfigError",
    "NumericalError",
    "ReportIntegrityError",
    "GradientWarning",
    "ConvergenceWarning",
]

__version__ = "0.1.0"
