"""Road segmentation by boundary regression with a CNN encoder and bi-directional GRUs."""

from .model import BoundaryPrediction, ModelConfig, ModelParams, count_params, forward, init_params
from .tensor import Tape, Tensor

__all__ = [
    "BoundaryPrediction",
    "ModelConfig",
    "ModelParams",
    "Tape",
    "Tensor",
    "count_params",
    "forward",
    "init_params",
]
