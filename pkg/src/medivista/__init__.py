"""Temporal-fusion video segmentation with a frozen image backbone, on a numpy autodiff engine."""
from .config import ModelConfig, RunConfig, TrainConfig
from .model import MediViSTA
from .tensor import NonFiniteError, Tensor, no_grad

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "MediViSTA", "NonFiniteError", "Tensor", "no_grad"]
__version__ = "0.1.0"
