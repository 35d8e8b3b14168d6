"""Tensor container and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(ValueError):
    """An operation received an input it cannot normalize (e.g. a zero vector)."""


class NonScalarLossError(ValueError):
    pass


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense row-major array with an optional gradient slot.

    ``data`` is always a float32 or float64 ndarray; everything else follows
    its dtype. ``grad`` is filled by :func:`backward` for leaf tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_from_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._from_tape = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(ops.as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use l2_normalize or scale")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward_fn: BackwardFn
    op: str


@dataclass
class Tape:
    """Ordered record of operation applications.

    Only operations with at least one gradient-requiring input are recorded.
    Use as a context manager to make it the active tape.
    """

    nodes: list = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        output._from_tape = True
        self.nodes.append(Node(tuple(inputs), output, backward_fn, op))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for a frozen teacher forward."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and, if a tape is active and any input needs grad, log the op."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf consumed by ``tape``.

    Gradients are accumulated into any existing ``.grad``; leaves the loss
    does not reach receive zeros.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and not t._from_tape:
                leaves[id(t)] = t
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    if loss.requires_grad and not loss._from_tape:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        g = g.astype(t.data.dtype, copy=False).reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
