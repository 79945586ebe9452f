"""Array arithmetic and reverse-mode autodiff used by the encoder and losses."""
from . import autodiff, kernels
from .autodiff import Node, ShapeError, backward, const, param, value_and_grad
from .gradcheck import finite_diff_gradient, max_relative_error

__all__ = [
    "Node",
    "ShapeError",
    "autodiff",
    "backward",
    "const",
    "finite_diff_gradient",
    "kernels",
    "max_relative_error",
    "param",
    "value_and_grad",
]
