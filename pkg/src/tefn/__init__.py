"""Time Evidence Fusion Network forecasting engine."""

from .model import TefnConfig, TefnParams, forward, init_params, param_count
from .training import TrainConfig, backward, train

__version__ = "0.1.0"

__all__ = [
    "TefnConfig",
    "TefnParams",
    "TrainConfig",
    "backward",
    "forward",
    "init_params",
    "param_count",
    "train",
]
