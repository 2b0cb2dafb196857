"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: each op eagerly computes its value with numpy and, when any
input requires grad, records a backward closure plus its parents. Nodes carry
a monotonically increasing creation id, so the implicit graph is a tape:
inputs always precede outputs, and backward() visits reachable nodes in
strict reverse creation order. Graphs are rebuilt on every forward pass.

Everything is float64. Softmax-family ops subtract the row max before
exponentiating so finite inputs can never overflow to inf.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_COUNTER = itertools.count()

_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    prev = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class ShapeError(ValueError):
    """Raised when an op receives non-conforming shapes."""


def _require(cond: bool, op: str, *shapes) -> None:
    if not cond:
        detail = ", ".join(str(tuple(s)) for s in shapes)
        raise ShapeError(f"{op}: incompatible shapes {detail}")


class Tensor:
    """A numpy-backed tensor node in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = None
        self.node_id = next(_COUNTER)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(op: str, value: np.ndarray, parents: tuple, backward) -> Tensor:
    record = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=record, op=op, parents=parents if record else ())
    if record:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across uses inside the graph, and leaf
    tensors keep accumulating across repeated backward calls. Interior node
    grads are pass-local (cleared at the start of each call).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    # Reachable set, then reverse creation order == reverse insertion order.
    seen = {loss.node_id}
    stack = [loss]
    nodes = []
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t.parents:
            if p.node_id not in seen:
                seen.add(p.node_id)
                stack.append(p)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    for t in nodes:
        if t.parents:
            t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# Elementwise / arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data + b.data
    except ValueError:
        _require(False, "add", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node("add", value, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data - b.data
    except ValueError:
        _require(False, "sub", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node("sub", value, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data * b.data
    except ValueError:
        _require(False, "mul", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", value, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data / b.data
    except ValueError:
        _require(False, "div", a.shape, b.shape)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node("div", value, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim >= 2 and b.ndim >= 2, "matmul", a.shape, b.shape)
    _require(a.shape[-1] == b.shape[-2], "matmul", a.shape, b.shape)
    value = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _node("matmul", value, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * value)

    return _node("exp", value, (a,), bwd)


def log(a: Tensor) -> Tensor:
    value = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _node("log", value, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    value = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * 0.5 / value)

    return _node("sqrt", value, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    value = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - value * value))

    return _node("tanh", value, (a,), bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    value = a.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return _node("gelu", value, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape ops


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    _require(sorted(perm) == list(range(a.ndim)), "transpose", a.shape, perm)
    value = np.transpose(a.data, perm)
    inv = np.argsort(perm)

    def bwd(g):
        _accumulate(a, np.transpose(g, inv))

    return _node("transpose", value, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError:
        _require(False, "reshape", a.shape, shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _node("reshape", value, (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    _require(len(tensors) >= 1, "concat", ())
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        _require(False, "concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node("concat", value, tuple(tensors), bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (tuples of slices/ints). Gradient scatters into zeros."""
    value = a.data[key]

    def bwd(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _node("slice", value, (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table [V, d], integer ids of any shape -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    _require(table.ndim == 2, "embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}), got {int(ids.min())}..{int(ids.max())}"
        )
    value = table.data[ids]

    def bwd(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _node("embedding", value, (table,), bwd)


# ---------------------------------------------------------------------------
# Reductions


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    value = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node("sum", value, (a,), bwd)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    value = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _node("mean", value, (a,), bwd)


# ---------------------------------------------------------------------------
# Softmax family (max-subtracted for overflow safety)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        _accumulate(a, value * (g - dot))

    return _node("softmax", value, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse

    def bwd(g):
        soft = np.exp(value)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _node("log_softmax", value, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    _require(gain.shape == (d,) and bias.shape == (d,), "layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv_std)

    return _node("layer_norm", value, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Index-target cross entropy over the last axis of 2-d logits [N, V]."""
    targets = np.asarray(targets)
    _require(logits.ndim == 2, "cross_entropy", logits.shape)
    _require(targets.shape == (logits.shape[0],), "cross_entropy", logits.shape, targets.shape)
    n, v = logits.shape
    if n and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"cross_entropy: target id outside [0, {v})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    losses = -logp[np.arange(n), targets]
    value = losses.mean() if reduction == "mean" else losses.sum()
    scale = 1.0 / n if reduction == "mean" else 1.0

    def bwd(g):
        soft = np.exp(logp)
        soft[np.arange(n), targets] -= 1.0
        _accumulate(logits, (float(np.asarray(g).sum()) * scale) * soft)

    return _node("cross_entropy", value, (logits,), bwd)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of two 1-d vectors; eps guards against zero vectors."""
    _require(a.ndim == 1 and a.shape == b.shape, "cosine_similarity", a.shape, b.shape)
    na = max(float(np.linalg.norm(a.data)), eps)
    nb = max(float(np.linalg.norm(b.data)), eps)
    dot = float(a.data @ b.data)
    value = dot / (na * nb)

    def bwd(g):
        g = float(np.asarray(g).sum())
        _accumulate(a, g * (b.data / (na * nb) - value * a.data / (na * na)))
        _accumulate(b, g * (a.data / (na * nb) - value * b.data / (nb * nb)))

    return _node("cosine_similarity", value, (a, b), bwd)
