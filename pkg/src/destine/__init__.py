"""Disentangled self-attention (DESTINE) CTR model in numpy, with manual backpropagation."""

from .attention import Variant
from .model import ModelConfig, ModelParams, forward, init_params, loss, param_count
from .training import TrainConfig, auc, grad_check, logloss, train

__all__ = [
    "ModelConfig", "ModelParams", "TrainConfig", "Variant", "auc", "forward", "grad_check",
    "init_params", "logloss", "loss", "param_count", "train",
]
__version__ = "0.1.0"
