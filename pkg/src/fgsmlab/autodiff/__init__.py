"""Reverse-mode automatic differentiation with second-order support."""
from .tensor import (
    Function,
    NonFiniteError,
    Tensor,
    as_tensor,
    enable_grad,
    grad,
    is_grad_enabled,
    no_grad,
    op_counter,
)
from .tensor import add, sub, mul, div, neg, exp, log, log1p, sqrt, tabs as abs, tsum as sum, mean
from .tensor import reshape, transpose, matmul, broadcast_to
from .functional import *  # noqa: F401,F403
from .functional import __all__ as _functional_all

__all__ = [
    "Function",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "enable_grad",
    "grad",
    "is_grad_enabled",
    "no_grad",
    "op_counter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "log1p",
    "sqrt",
    "abs",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "matmul",
    "broadcast_to",
    *_functional_all,
]
