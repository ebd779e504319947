"""Reverse-mode autodiff on dense numpy arrays.

A thread-local Wengert tape records every differentiable operation in
execution order; ``backward`` replays the tape in reverse, which is a valid
reverse topological order by construction and therefore bitwise deterministic
for fixed inputs. Storage is float32 by default with a float64 mode switch
used by the gradient checks.
"""

from __future__ import annotations

import math
import threading
from typing import Iterable, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tape:
    """Ordered record of executed operations with their backward closures.

    ``drop_before`` prunes entries that can no longer receive gradients
    (used by the streaming trainer once carried state has been detached);
    positions are absolute so marks stay valid across pruning.
    """

    def __init__(self):
        self._entries: list[tuple["Tensor", object]] = []
        self._base = 0

    def record(self, out: "Tensor", backward_fn) -> None:
        self._entries.append((out, backward_fn))

    def position(self) -> int:
        return self._base + len(self._entries)

    def drop_before(self, position: int) -> None:
        keep = max(0, position - self._base)
        if keep:
            del self._entries[:keep]
            self._base += keep

    def clear(self) -> None:
        self._base += len(self._entries)
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.default_dtype = np.dtype(np.float32)


_state = _ThreadState()


def active_tape() -> Tape:
    return _state.tape


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("default dtype must be float32 or float64")
    _state.default_dtype = dt


def default_dtype() -> np.dtype:
    return _state.default_dtype


class no_grad:
    """Disable tape recording inside the context."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class use_dtype:
    """Temporarily switch the default storage dtype."""

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype)

    def __enter__(self):
        self._prev = _state.default_dtype
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        _state.default_dtype = self._prev
        return False


class fresh_tape:
    """Run on a private tape, restoring the previous one on exit."""

    def __enter__(self) -> Tape:
        self._prev = _state.tape
        _state.tape = Tape()
        return _state.tape

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class Tensor:
    """Dense array with optional gradient accumulation buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_state.default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A leaf constant sharing this tensor's values."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False).reshape(self.data.shape)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; second operands may be Tensors, arrays or numbers
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, like=self))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create an op output and record it on the active tape if grads flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    rg = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out._is_leaf = not rg
    if rg:
        _state.tape.record(out, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray, grads: dict) -> None:
    if not t.requires_grad:
        return
    if t._is_leaf:
        t._accum_grad(g)
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf.

    The loss must be scalar. Gradients of intermediates are kept off-tensor
    so repeated backward calls accumulate exactly once per call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._is_leaf:
        if loss.requires_grad:
            loss._accum_grad(np.ones_like(loss.data))
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, fn in reversed(_state.tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        fn(g, grads)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the original operand shape after broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        data = a.data + b

        def bwd(g, grads):
            _accumulate(a, g, grads)

        return _make(data, (a,), bwd)
    b = _wrap(b, like=a)
    data = a.data + b.data

    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g, a.data.shape), grads)
        _accumulate(b, _unbroadcast(g, b.data.shape), grads)

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    b = _wrap(b, like=a)
    data = a.data - b.data

    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g, a.data.shape), grads)
        _accumulate(b, _unbroadcast(-g, b.data.shape), grads)

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    b = _wrap(b, like=a)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g * bd, a.data.shape), grads)
        _accumulate(b, _unbroadcast(g * ad, b.data.shape), grads)

    return _make(data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, 1.0 / float(b))
    b = _wrap(b, like=a)
    data = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g, grads):
        _accumulate(a, _unbroadcast(g / bd, a.data.shape), grads)
        _accumulate(b, _unbroadcast(-g * ad / (bd * bd), b.data.shape), grads)

    return _make(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g, grads):
        _accumulate(a, -g, grads)

    return _make(-a.data, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar; keeps the operand dtype."""

    def bwd(g, grads):
        _accumulate(a, g * s, grads)

    return _make(a.data * s, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for operands of rank >= 2, with batched leading dims."""
    a = _wrap(a)
    b = _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    ad, bd = a.data, b.data

    def bwd(g, grads):
        if a.requires_grad:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(ga, ad.shape), grads)
        if b.requires_grad:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            _accumulate(b, _unbroadcast(gb, bd.shape), grads)

    return _make(data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with constant exponent."""
    data = a.data ** p
    ad = a.data

    def bwd(g, grads):
        _accumulate(a, g * p * ad ** (p - 1.0), grads)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# elementwise transcendentals

def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g, grads):
        _accumulate(a, g * data, grads)

    return _make(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    ad = a.data

    def bwd(g, grads):
        _accumulate(a, g / ad, grads)

    return _make(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bwd(g, grads):
        _accumulate(a, g * 0.5 / data, grads)

    return _make(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g, grads):
        _accumulate(a, g * (1.0 - data * data), grads)

    return _make(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def bwd(g, grads):
        _accumulate(a, g * data * (1.0 - data), grads)

    return _make(data, (a,), bwd)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    ad = a.data
    data = np.log1p(np.exp(-np.abs(ad))) + np.maximum(ad, 0.0)

    def bwd(g, grads):
        _accumulate(a, g * _sigmoid_np(ad), grads)

    return _make(data, (a,), bwd)


def absolute(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g, grads):
        _accumulate(a, g * np.sign(ad), grads)

    return _make(np.abs(ad), (a,), bwd)


def sin(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g, grads):
        _accumulate(a, g * np.cos(ad), grads)

    return _make(np.sin(ad), (a,), bwd)


def cos(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g, grads):
        _accumulate(a, -g * np.sin(ad), grads)

    return _make(np.cos(ad), (a,), bwd)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y = _wrap(y)
    x = _wrap(x, like=y)
    data = np.arctan2(y.data, x.data)
    yd, xd = y.data, x.data

    def bwd(g, grads):
        denom = xd * xd + yd * yd
        _accumulate(y, g * xd / denom, grads)
        _accumulate(x, -g * yd / denom, grads)

    return _make(data, (y, x), bwd)


# ---------------------------------------------------------------------------
# reductions and structure

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g, grads):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, shape).copy(), grads)

    return _make(data, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g, grads):
        _accumulate(a, g.reshape(old), grads)

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bwd(g, grads):
        _accumulate(a, g.transpose(inv), grads)

    return _make(data, (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [t.data.shape[axis] for t in ts]

    def bwd(g, grads):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(ts, pieces):
            _accumulate(t, piece, grads)

    return _make(data, ts, bwd)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("stack needs at least one tensor")
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bwd(g, grads):
        for i, t in enumerate(ts):
            _accumulate(t, np.take(g, i, axis=axis), grads)

    return _make(data, ts, bwd)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic indexing only (ints, slices, tuples thereof)."""
    data = a.data[idx]
    shape = a.data.shape

    def bwd(g, grads):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[idx] = g
        _accumulate(a, ga, grads)

    return _make(data, (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.take(a.data, idx, axis=0)

    def bwd(g, grads):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accumulate(a, ga, grads)

    return _make(data, (a,), bwd)


def scatter_rows(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of ``a`` at unique positions ``idx`` in an n-row zero canvas."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n,) + a.data.shape[1:], dtype=a.data.dtype)
    data[idx] = a.data

    def bwd(g, grads):
        _accumulate(a, np.take(g, idx, axis=0), grads)

    return _make(data, (a,), bwd)
