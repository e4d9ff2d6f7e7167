"""Desk-scale simulator of label-at-server semi-supervised federated learning."""
from .errors import ConfigError, NumericError, ShapeError, TrainingError
from .federation import METHODS, RunConfig, run_training

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericError", "ShapeError", "TrainingError", "METHODS", "RunConfig", "run_training"]
