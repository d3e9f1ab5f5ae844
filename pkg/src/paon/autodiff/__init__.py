"""Minimal dense-tensor engine with tape-based reverse-mode differentiation."""

from .ops import (
    conv2d,
    global_avg_pool,
    pixel_shuffle,
    pixel_unshuffle,
    rational,
    translate_bilinear,
)
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    debug_mode,
    default_dtype,
    div,
    gelu,
    make_op,
    mean,
    mul,
    no_grad,
    pow_elementwise,
    reshape,
    scalar_mul,
    set_debug,
    shadow64,
    sub,
    sum_,
    tanh,
)

__all__ = [
    "Tensor", "abs_", "add", "as_tensor", "backward", "conv2d", "debug_mode", "default_dtype",
    "div", "gelu", "global_avg_pool", "make_op", "mean", "mul", "no_grad", "pixel_shuffle",
    "pixel_unshuffle", "pow_elementwise", "rational", "reshape", "scalar_mul", "set_debug",
    "shadow64", "sub", "sum_", "tanh", "translate_bilinear",
]
