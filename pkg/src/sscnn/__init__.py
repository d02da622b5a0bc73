"""Structured-component forecasting with selective normalisation maps."""

from .model import ModelConfig, count_parameters, forward, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, fit, train

__all__ = ["ModelConfig", "TrainConfig", "count_parameters", "evaluate", "fit", "forward",
           "init_params", "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
