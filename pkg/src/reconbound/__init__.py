"""Reconstruction-attack MSE lower bounds from order-2 Renyi DP and Fisher information leakage."""

from reconbound.autodiff import ConvergenceError, NonSmoothPrimitiveError
from reconbound.data import DataError, Dataset, Sample
from reconbound.models import ModelSpec

__version__ = "0.1.0"

__all__ = ["ConvergenceError", "NonSmoothPrimitiveError", "DataError", "Dataset", "Sample", "ModelSpec",
           "__version__"]
