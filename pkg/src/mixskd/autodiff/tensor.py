"""Dense tensor with reverse-mode gradient recording.

Every differentiable primitive produces a :class:`Tensor` carrying a
:class:`Node` that links it to its inputs and knows how to map an upstream
gradient to input gradients.  :class:`Tape` linearizes that graph into
topological order for one backward sweep.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import InvalidShapeError

_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with.

    Training runs in float32; gradient oracles switch to float64.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """n-dimensional float array that can participate in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, _node: Node | None = None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if self.requires_grad else None
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._node.op}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    def __len__(self) -> int:
        return self.shape[0]

    # Arithmetic sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a primitive's output, recording a node only if some input needs grad."""
    needs = any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(data, dtype=data.dtype)
    out = Tensor(data, dtype=data.dtype, _node=Node(op, tuple(inputs), backward_fn))
    out.requires_grad = True
    out.grad = None  # non-leaf gradients are held by the sweep, not stored
    return out


@dataclass
class Tape:
    """Topologically ordered record of the primitives that produced ``output``."""

    output: Tensor
    entries: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        # Iterative post-order DFS; deep graphs would overflow recursion.
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    # Marked on expansion, not on push: a node reachable by two
                    # paths must still finish before every consumer.
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(output, [t for t in order if t._node is not None])


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.data.size != 1:
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._node.backward_fn(g)
        for parent, pg in zip(t._node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = parent.grad + pg.astype(parent.data.dtype, copy=False)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- detach bookkeeping for finite-difference checks -------------------------
#
# A finite-difference probe of f(x) also moves values that f treats as
# constants (detached targets).  While recording, every detach stores its
# value; while replaying, detach returns the stored value instead, so that the
# numeric derivative only follows declared-differentiable paths.


class _DetachLog:
    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.replaying = False
        self.cursor = 0

    def take(self, value: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(value.copy())
            return value
        stored = self.values[self.cursor]
        self.cursor += 1
        return stored

    @contextlib.contextmanager
    def replay(self) -> Iterator[None]:
        self.replaying, self.cursor = True, 0
        try:
            yield
        finally:
            self.replaying = False


def _active_detach_log() -> _DetachLog | None:
    return getattr(_local, "detach_log", None)


@contextlib.contextmanager
def detach_log() -> Iterator[_DetachLog]:
    prev = _active_detach_log()
    log = _DetachLog()
    _local.detach_log = log
    try:
        yield log
    finally:
        _local.detach_log = prev
