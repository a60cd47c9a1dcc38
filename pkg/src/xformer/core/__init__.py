"""Tensor engine: dense arrays, primitives and reverse-mode differentiation."""

from . import ops
from .gradcheck import finite_diff_check
from .module import Module
from .ops import (
    activation,
    conv2d,
    cross_entropy,
    gelu,
    l2_normalize_rows,
    layer_norm,
    matmul,
    relu,
    sigmoid,
    silu,
    softmax_rows,
)
from .tensor import (
    GradientError,
    GradTape,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    no_grad,
    record_shapes,
    set_default_dtype,
)

__all__ = [
    "ops",
    "Tensor",
    "Parameter",
    "GradTape",
    "Module",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "backward",
    "no_grad",
    "record_shapes",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "finite_diff_check",
    "activation",
    "conv2d",
    "cross_entropy",
    "gelu",
    "l2_normalize_rows",
    "layer_norm",
    "matmul",
    "relu",
    "sigmoid",
    "silu",
    "softmax_rows",
]
