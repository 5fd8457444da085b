"""Reverse-mode automatic differentiation over numpy arrays.

A Wengert-list implementation in float64.  Operations executed inside a
``with record() as t:`` block append backward closures to the active tape;
outside a block they are plain numpy calls, which keeps environment rollouts
cheap.  ``Tape.backward`` walks the list in reverse and accumulates ``.grad``
on every participating tensor.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "clip",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gather_axis1",
    "gather_rows",
    "log",
    "log_softmax",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "neg",
    "no_grad",
    "record",
    "relu",
    "reshape",
    "scatter_sum_axis1",
    "sigmoid",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "tanh",
    "tsum",
]

# With the flag on, every freshly created tensor is checked for NaN/Inf.
DEBUG_NAN = False


class Tensor:
    """Array value tracked by the tape; holds data and an accumulated grad."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if DEBUG_NAN and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite tensor value")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


class Tape:
    """Recorded operation list for one forward evaluation."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def append(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._records.append((out, inputs, backward))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor, seed=None) -> None:
        """Accumulate d(loss)/dx into x.grad for every tensor on the tape.

        The loss must be scalar unless an explicit seed of matching shape is
        given.  Each record is visited exactly once, in reverse order.
        """
        if seed is None:
            if loss.data.shape != ():
                raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
            seed = np.float64(1.0)
        g0 = np.asarray(seed, dtype=np.float64)
        loss.grad = g0 if loss.grad is None else loss.grad + g0
        for out, inputs, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for t, gi in zip(inputs, grads):
                if gi is None:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


_active: Tape | None = None


@contextlib.contextmanager
def record() -> Iterator[Tape]:
    """Open a fresh tape and make it the recording target."""
    global _active
    prev = _active
    _active = t = Tape()
    try:
        yield t
    finally:
        _active = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording inside an active record() block."""
    global _active
    prev = _active
    _active = None
    try:
        yield
    finally:
        _active = prev


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)
    if _active is not None:
        def bwd(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
        _active.append(out, (a, b), bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)
    if _active is not None:
        def bwd(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
        _active.append(out, (a, b), bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)
    if _active is not None:
        def bwd(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))
        _active.append(out, (a, b), bwd)
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data)
    if _active is not None:
        def bwd(g):
            return (_unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        _active.append(out, (a, b), bwd)
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data)
    if _active is not None:
        _active.append(out, (a,), lambda g: (-g,))
    return out


def square(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * a.data)
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * 2.0 * a.data,))
    return out


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sqrt(a.data))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * 0.5 / out.data,))
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.data))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * out.data,))
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g / a.data,))
    return out


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.tanh(a.data))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if _active is not None:
        _active.append(out, (a,), lambda g: (g * (a.data > 0.0),))
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior (incl. bounds)."""
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi))
    if _active is not None:
        mask = (a.data >= lo) & (a.data <= hi)
        _active.append(out, (a,), lambda g: (g * mask,))
    return out


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.maximum(a.data, b.data))
    if _active is not None:
        mask = a.data >= b.data
        def bwd(g):
            return (_unbroadcast(g * mask, a.data.shape),
                    _unbroadcast(g * ~mask, b.data.shape))
        _active.append(out, (a, b), bwd)
    return out


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.minimum(a.data, b.data))
    if _active is not None:
        mask = a.data <= b.data
        def bwd(g):
            return (_unbroadcast(g * mask, a.data.shape),
                    _unbroadcast(g * ~mask, b.data.shape))
        _active.append(out, (a, b), bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _active is not None:
        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape),)
        _active.append(out, (a,), bwd)
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if _active is not None:
        denom = a.data.size if axis is None else a.data.shape[axis]
        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / denom, a.data.shape),)
        _active.append(out, (a,), bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape))
    if _active is not None:
        _active.append(out, (a,), lambda g: (np.asarray(g).reshape(a.data.shape),))
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if _active is not None:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            return tuple(np.split(np.asarray(g), splits, axis=axis))
        _active.append(out, tuple(parts), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra and indexing


def matmul(a, b) -> Tensor:
    """a @ b with b strictly 2-D; a is rank-1 or higher with matching last dim."""
    a, b = _wrap(a), _wrap(b)
    if b.data.ndim != 2:
        raise ValueError(f"matmul rhs must be 2-D, got shape {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    if _active is not None:
        def bwd(g):
            g = np.asarray(g)
            ga = np.matmul(g, b.data.T)
            k = a.data.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.data.shape[1])
            return ga, gb
        _active.append(out, (a, b), bwd)
    return out


def gather_rows(a, idx) -> Tensor:
    """Pick a[i, idx[i]] for each row i; returns shape (B,)."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])
    if _active is not None:
        def bwd(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), np.asarray(g))
            return (ga,)
        _active.append(out, (a,), bwd)
    return out


def gather_axis1(a, idx) -> Tensor:
    """a[:, idx, :] for a of shape (B, N, F); idx may repeat."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[:, idx, :])
    if _active is not None:
        def bwd(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (slice(None), idx), np.asarray(g))
            return (ga,)
        _active.append(out, (a,), bwd)
    return out


def scatter_sum_axis1(a, idx, size: int) -> Tensor:
    """Sum rows of a (B, E, F) into slots idx along a fresh axis of length size.

    np.add.at accumulates in idx order, so for a fixed idx the summation
    order (and the float result) is reproducible bitwise.
    """
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((a.data.shape[0], size, a.data.shape[2]))
    np.add.at(data, (slice(None), idx), a.data)
    out = Tensor(data)
    if _active is not None:
        _active.append(out, (a,), lambda g: (np.asarray(g)[:, idx, :],))
    return out


# ---------------------------------------------------------------------------
# softmax family


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    if _active is not None:
        def bwd(g):
            g = np.asarray(g)
            return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)
        _active.append(out, (a,), bwd)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# ---------------------------------------------------------------------------
# convolution (stride 1, no padding)


def conv2d(x, w, b) -> Tensor:
    """x (B,C,H,W) * w (O,C,kh,kw) + b (O,) -> (B,O,H-kh+1,W-kw+1)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    B, C, H, W = x.data.shape
    O, C2, kh, kw = w.data.shape
    if C2 != C:
        raise ValueError(f"channel mismatch: input {C}, kernel {C2}")
    oh, ow = H - kh + 1, W - kw + 1
    cols = np.empty((B, C, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x.data[:, :, i:i + oh, j:j + ow]
    cols2 = cols.reshape(B, C * kh * kw, oh * ow)
    w2 = w.data.reshape(O, C * kh * kw)
    out_data = np.matmul(w2, cols2).reshape(B, O, oh, ow) + b.data[:, None, None]
    out = Tensor(out_data)
    if _active is not None:
        def bwd(g):
            g2 = np.asarray(g).reshape(B, O, oh * ow)
            gb = g2.sum(axis=(0, 2))
            gw = np.einsum("bop,bkp->ok", g2, cols2).reshape(w.data.shape)
            gcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, oh, ow)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + oh, j:j + ow] += gcols[:, :, i, j]
            return gx, gw, gb
        _active.append(out, (x, w, b), bwd)
    return out
