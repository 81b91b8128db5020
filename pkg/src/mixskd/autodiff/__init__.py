"""Minimal numpy tensor engine with reverse-mode differentiation."""
from .gradcheck import GradcheckReport, finite_diff_gradcheck
from .ops import (
    add, clip, concat, conv2d, detach, flatten, global_avg_pool, grad_reverse, linear, log,
    log_softmax_t, mean, mul, relu, reshape, sigmoid, softmax_t, square, sub, sum, sum_axis,
)
from .serialize import load_tensor, read_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import Node, Tape, Tensor, as_tensor, backward, default_dtype, precision

__all__ = [
    "GradcheckReport", "Node", "Tape", "Tensor", "add", "as_tensor", "backward", "clip",
    "concat", "conv2d", "default_dtype", "detach", "finite_diff_gradcheck", "flatten",
    "global_avg_pool", "grad_reverse", "linear", "load_tensor", "log", "log_softmax_t",
    "mean", "mul", "precision", "read_tensor", "relu", "reshape", "save_tensor", "sigmoid",
    "softmax_t", "square", "sub", "sum", "sum_axis", "tensor_from_bytes", "tensor_to_bytes",
]
