"""Self-supervised learned Kalman filtering and smoothing with locally linear transitions."""

from .gaussian import EmissionModel, Gaussian, NumericalError
from .neural import ExpertPrior, Model, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EmissionModel",
    "ExpertPrior",
    "Gaussian",
    "Model",
    "NumericalError",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
]
