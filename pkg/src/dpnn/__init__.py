"""Depth-projection network for 3-class classification of 3D brain volumes.

The package bundles a small reverse-mode autodiff engine on numpy, the
layers, losses and optimizer built on it, a tensor-factorization target
generator, synthetic phantoms and the training/evaluation pipeline.
"""

from .errors import ConfigError, ContractError, DegenerateInputError, DpnnError, ShapeError, VolumeIOError
from .tensor import Tensor, backward, finite_diff_check, no_grad, tensor_from

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DpnnError",
    "ShapeError",
    "Tensor",
    "VolumeIOError",
    "backward",
    "finite_diff_check",
    "no_grad",
    "tensor_from",
]
__version__ = "0.1.0"
