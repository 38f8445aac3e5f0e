"""Numpy tensors with tape-based reverse-mode differentiation."""

from .gradcheck import grad_check, run_suite
from .ops import (
    LAYOUTS,
    PROB_EPS,
    add,
    avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    elementwise,
    flatten,
    global_avg_pool2d,
    linear,
    max_pool2d,
    mul,
    out_size,
    permute,
    pool2d,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    sum_all,
    to_cnhw,
    to_nchw,
    weighted_bce,
)
from .tensor import Tape, Tensor, TensorError, active_tape, backward

__all__ = [
    "LAYOUTS",
    "PROB_EPS",
    "Tape",
    "Tensor",
    "TensorError",
    "active_tape",
    "add",
    "avg_pool2d",
    "backward",
    "batch_norm2d",
    "concat_channels",
    "conv2d",
    "elementwise",
    "flatten",
    "global_avg_pool2d",
    "grad_check",
    "linear",
    "max_pool2d",
    "mul",
    "out_size",
    "permute",
    "pool2d",
    "relu",
    "reshape",
    "run_suite",
    "sigmoid",
    "slice_channels",
    "sum_all",
    "to_cnhw",
    "to_nchw",
    "weighted_bce",
]
