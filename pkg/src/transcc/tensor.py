"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every differentiable operation executed while it is
active (define-by-run). :meth:`Tape.backward` replays the records once, in
exact reverse execution order, accumulating gradients onto every tensor with
``requires_grad``. Reverse execution order is a valid topological order
because an operation can only consume tensors that already exist.

Gradients accumulate across backward passes until cleared with
:meth:`Tensor.zero_grad`; each tape is intended for a single backward pass.
Operations executed with no tape active compute values only and record
nothing, which is the inference path.

Default storage precision is float32; gradient testing runs the same code in
float64 by constructing float64 tensors.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DetachedTensorError, NotScalarError, ShapeMismatchError

__all__ = [
    "Tape",
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "clip",
    "reshape",
    "transpose",
    "concat",
    "take",
    "tsum",
    "tmean",
    "softmax",
    "current_tape",
]


class Tape:
    """Ordered record of operations; context manager that enables recording."""

    def __init__(self) -> None:
        self._entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(t) onto ``t.grad`` for every recorded tensor."""
        if loss.data.size != 1:
            raise NotScalarError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is None or loss._tape() is not self or loss._index is None:
            raise DetachedTensorError("loss was not recorded on this tape")
        _accumulate(loss, np.ones_like(loss.data), None)
        for entry in reversed(self._entries[: loss._index + 1]):
            grad_out = entry.out.grad
            if grad_out is None:
                continue
            for src, grad in zip(entry.inputs, entry.backward(grad_out)):
                if grad is None or not src.requires_grad:
                    continue
                _accumulate(src, grad, grad_out)


_TAPE_STACK: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: weakref.ref[Tape] | None = None
        self._index: int | None = None

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The live value buffer (not a copy)."""
        return self.data

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    # --- graph control ---------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = self._tape() if self._tape is not None else None
        if tape is None:
            raise DetachedTensorError("tensor was not recorded on any live tape")
        tape.backward(self)

    # --- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _const_like(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _const_like(other, self))

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, _const_like(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _const_like(other, self))

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _const_like(value, ref: Tensor) -> Tensor:
    """Wrap scalars/arrays as constant tensors, matching ref's float dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _accumulate(t: Tensor, grad: np.ndarray, grad_out) -> None:
    # First deposit takes ownership; copy when the rule handed back a view
    # or the upstream gradient itself, so later += cannot corrupt either.
    if t.grad is None:
        if grad is grad_out or grad.base is not None or not grad.flags.writeable:
            grad = grad.copy()
        t.grad = grad
    else:
        t.grad += grad


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    """Create the output tensor and register it on the active tape.

    ``backward(grad_out) -> tuple`` must return one gradient per input,
    already summed down to that input's exact shape (``None`` to skip).
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        # Weak reference: the tape owns the graph (entries -> tensors), so a
        # strong back-pointer would form cycles that keep every intermediate
        # buffer alive until a full garbage-collection pass. With a weak link
        # the whole graph frees by reference count as soon as the tape dies.
        out._tape = weakref.ref(tape)
        out._index = len(tape._entries)
        tape._entries.append(_Entry(out, tuple(inputs), backward))
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to ``shape`` under right-aligned broadcasting rules."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_result(a: Tensor, b: Tensor, op) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError as err:
        raise ShapeMismatchError(
            f"cannot broadcast shapes {a.shape} and {b.shape}"
        ) from err


# --- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_result(a, b, np.add)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_result(a, b, np.subtract)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_result(a, b, np.multiply)
    a_data, b_data = a.data, b.data

    def backward(g):
        return unbroadcast(g * b_data, a.shape), unbroadcast(g * a_data, b.shape)

    return record((a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _broadcast_result(a, b, np.divide)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = unbroadcast(g / b_data, a.shape)
        gb = unbroadcast(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return record((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return record((a,), -a.data, lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant float exponent."""
    p = float(p)
    out = a.data**p
    a_data = a.data

    def backward(g):
        return (g * p * a_data ** (p - 1.0),)

    return record((a,), out, backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a_data = a.data
    return record((a,), np.log(a_data), lambda g: (g / a_data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record((a,), out, lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record((a,), out, lambda g: (g * (1.0 - out * out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; clamped positions get zero gradient."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        return (g * inside,)

    return record((a,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs >=2-D operands, got {a.shape} and {b.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as err:
        raise ShapeMismatchError(
            f"matmul shapes {a.shape} and {b.shape} are incompatible"
        ) from err
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b.shape)
        return ga, gb

    return record((a, b), out, backward)


# --- movement -----------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatchError(f"cannot reshape {in_shape} to {shape}") from err
    return record((a,), out, lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return record((a,), out, lambda g: (g.transpose(inverse),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeMismatchError(
            f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}"
        ) from err
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record(tuple(ts), out, backward)


def take(a: Tensor, key) -> Tensor:
    """Basic indexing (ints/slices); gradient scatters into zeros."""
    out = a.data[key]
    in_shape, in_dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(in_shape, dtype=in_dtype)
        full[key] = g
        return (full,)

    return record((a,), out, backward)


# --- reductions -----------------------------------------------------------


def _restore_axes(g: np.ndarray, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        expanded = list(g.shape)
        for ax in sorted(axes):
            expanded.insert(ax, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        return (_restore_axes(g, in_shape, axis, keepdims),)

    return record((a,), out, backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.data.size if out.ndim == 0 else a.data.size // max(out.size, 1)

    def backward(g):
        return (_restore_axes(g, in_shape, axis, keepdims) / count,)

    return record((a,), out, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record((a,), out, backward)
