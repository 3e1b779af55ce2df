"""Minimal reverse-mode automatic differentiation over float64 arrays."""
from . import ops
from .gradcheck import check_gradient, numeric_gradient
from .node import (
    MAX_ORDER,
    GradError,
    Node,
    NonFiniteError,
    ShapeError,
    UnsupportedDepthError,
    as_tensor,
    checked,
    constant,
    grad,
    leaf,
    no_grad,
)

__all__ = [
    "MAX_ORDER", "GradError", "Node", "NonFiniteError", "ShapeError", "UnsupportedDepthError",
    "as_tensor", "check_gradient", "checked", "constant", "grad", "leaf", "no_grad",
    "numeric_gradient", "ops",
]
