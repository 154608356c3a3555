"""Semantic-guided human matting in numpy: autodiff engine, model, synthetic data, training and metrics."""

from .model import ModelConfig, SGHM
from .tensor import Tape, Tensor

__all__ = ["ModelConfig", "SGHM", "Tape", "Tensor"]
__version__ = "0.1.0"
