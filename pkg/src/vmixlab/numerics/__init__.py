"""Tensor substrate: reverse-mode autodiff, deterministic RNG, grad checking."""

from .gradcheck import finite_diff_grad_check
from .rng import Rng, fnv1a64
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    group_norm,
    layer_norm_lastdim,
    linear,
    matmul,
    mul,
    no_finite_checks,
    no_grad,
    power,
    reshape,
    sigmoid,
    silu,
    sinusoidal_embedding,
    softmax_lastdim,
    softmax_rows,
    square,
    swapaxes,
    tensor,
    texp,
    tmean,
    transpose,
    tsum,
    upsample_nearest2x,
)

__all__ = [
    "NonFiniteError", "ShapeError", "Tensor", "Rng", "fnv1a64",
    "finite_diff_grad_check", "add", "concat", "conv2d", "group_norm",
    "layer_norm_lastdim", "linear", "matmul", "mul", "no_finite_checks",
    "no_grad", "power", "reshape", "sigmoid", "silu", "sinusoidal_embedding",
    "softmax_lastdim", "softmax_rows", "square", "swapaxes", "tensor", "texp",
    "tmean", "transpose", "tsum", "upsample_nearest2x",
]
