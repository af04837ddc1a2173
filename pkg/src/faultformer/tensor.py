"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``Tensor.backward`` walks the graph in
reverse topological order. Gradients accumulate additively, so fan-out
(``x + x``) needs no special handling.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        order = topological_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest node (in evaluation order) whose value is not finite."""
    for node in topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), "div", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * a.data * g))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        a._accumulate(g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)))

    return _make(x * cdf, (a,), "gelu", backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), "dropout", lambda g: a._accumulate(g * keep))


# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), "transpose", lambda g: a._accumulate(g.transpose(inv)))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        a._accumulate(full)

    return _make(a.data[idx], (a,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), "broadcast",
        lambda g: a._accumulate(_unbroadcast(g, a.shape)),
    )


def pad_last(a: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    n = a.shape[-1]
    return _make(np.pad(a.data, widths), (a,), "pad", lambda g: a._accumulate(g[..., left:left + n]))


# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("softmax received NaN input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (a,), "softmax", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(a.data).any():
        raise NumericError("log_softmax received NaN input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), "log_softmax", backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        labels = labels.reshape(1)
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])
    return mul(tsum(getitem(lp, (rows, labels))), -1.0 / labels.shape[0])


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with the population variance, then scale and shift."""
    d = x.shape[-1]
    if d == 1 and eps == 0:
        raise ZeroDivisionError("layer_norm over a single feature with eps=0 divides by zero")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gamma, beta), "layer_norm", backward)


def rope(x: Tensor, positions) -> Tensor:
    """Rotate consecutive feature pairs of ``x`` (..., n, d) by position-dependent angles."""
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"rotary embedding needs an even head dimension, got {d}")
    positions = np.asarray(positions, dtype=DTYPE)
    theta = 10000.0 ** (-2.0 * np.arange(d // 2) / d)
    ang = positions[:, None] * theta[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def rotate(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _make(rotate(x.data, sin), (x,), "rope", lambda g: x._accumulate(rotate(g, -sin)))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           pad_left: int = 0, pad_right: int = 0) -> Tensor:
    """1-D cross-correlation. x: (B, C_in, L), w: (C_out, C_in, K) -> (B, C_out, L_out)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d shape mismatch: input {x.shape}, weight {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    length = xp.shape[2]
    if length < k:
        raise ShapeError(f"conv1d input too short: padded length {length} < kernel {k}")
    n_out = (length - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :n_out]
    out = np.einsum("bclk,ock->bol", win, w.data, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("bol,bclk->ock", g, win, optimize=True))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = np.zeros_like(xp)
            for j in range(k):
                gx[:, :, j:j + stride * n_out:stride] += np.einsum("bol,oc->bcl", g, w.data[:, :, j])
            x._accumulate(gx[:, :, pad_left:pad_left + x.shape[2]])

    return _make(out, parents, "conv1d", backward)


def adaptive_avg_pool1d(x: Tensor, size: int) -> Tensor:
    """Average the last axis into ``size`` bins [floor(jL/P), ceil((j+1)L/P))."""
    length = x.shape[-1]
    starts = (np.arange(size) * length) // size
    ends = -((-(np.arange(1, size + 1) * length)) // size)
    pool = np.zeros((length, size))
    for j, (s, e) in enumerate(zip(starts, ends)):
        pool[s:e, j] = 1.0 / (e - s)
    return matmul(x, Tensor(pool))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
