"""Whitening feature transforms for neural network layers.

The package couples per-sample scale standardization with batch-statistics
decorrelation fused into layer weights, plus the machinery needed to train
and verify small models built on it.
"""

from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor, backprop, parameter

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "Tensor",
    "backprop",
    "parameter",
]

__version__ = "0.1.0"
