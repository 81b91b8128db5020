"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
that maps the upstream gradient to one gradient per input (``None`` for
inputs that are not differentiable).
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EvaluationError, InvalidConfigError, InvalidShapeError
from .tensor import Tensor, _active_detach_log, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scalar_or_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    # Constants take the other operand's precision, so 0.3 stays 0.3 in float64 graphs.
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else None)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    return _scalar_or_tensor(a, like), _scalar_or_tensor(b, like)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data + b.data
    return make_result(out, "add", (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    out = a.data - b.data
    return make_result(out, "sub", (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (scalars allowed)."""
    a, b = _operands(a, b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return make_result(out.astype(np.result_type(a.data, b.data), copy=False), "mul", (a, b), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_result(out, "mean", (x,),
                       lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)
    return make_result(out, "sum_axis", (x,),
                       lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise InvalidShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise InvalidShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(out, "concat", tuple(xs), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    # Subgradient at exactly 0 is 0.
    return make_result(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise EvaluationError("log of a non-positive value")
    out = np.log(x.data)
    return make_result(out, "log", (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return make_result(out, "clip", (x,), lambda g: (g * inside,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape [N, Cin] and weight [Cout, Cin]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise InvalidShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, "linear", inputs, bw)


def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    if stride < 1 or padding < 0:
        raise InvalidConfigError(f"conv2d: stride={stride}, padding={padding}")
    if n + 2 * padding < k:
        raise InvalidConfigError(f"conv2d: extent {n} with padding {padding} is smaller than kernel {k}")
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via an im2col window view."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidShapeError(f"conv2d: input {x.shape}, weight {weight.shape} must be 4-D")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise InvalidShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are output positions, columns are (C, kh, kw) patches.
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        grads = []
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            grads.append(gx)
        else:
            grads.append(None)
        grads.append((g2.T @ cols).reshape(weight.shape))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out, "conv2d", inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise InvalidShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return make_result(out, "gap", (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(x.dtype),))


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise InvalidConfigError(f"temperature must be positive, got {T}")


def log_softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    _check_temperature(T)
    z = logits.data / T
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / T,)

    return make_result(out, "log_softmax", (logits,), bw)


def softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / T`` with max subtraction."""
    _check_temperature(T)
    z = logits.data / T
    e = np.exp(z - z.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=1, keepdims=True))) / T,)

    return make_result(out, "softmax", (logits,), bw)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    value = x.data.copy()
    log = _active_detach_log()
    if log is not None:
        value = log.take(value)
    return Tensor(value, dtype=value.dtype)


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the gradient by ``-scale``."""
    out = x.data.copy()
    return make_result(out, "grad_reverse", (x,), lambda g: (-scale * g,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


__all__ = [
    "add", "sub", "mul", "sum", "mean", "sum_axis", "reshape", "flatten", "concat",
    "relu", "sigmoid", "log", "clip", "linear", "conv2d", "global_avg_pool",
    "log_softmax_t", "softmax_t", "detach", "grad_reverse", "square", "as_tensor",
]
