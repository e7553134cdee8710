"""Dense float64 tensors with eager reverse-mode differentiation.

Every op records its inputs and a closure computing input gradients from the
output gradient. Nodes carry a global creation index, so the creation order is
a valid topological order and ``backward`` simply walks it in reverse.
"""
from __future__ import annotations

import itertools
import struct
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_creation = itertools.count()
_grad_enabled = True

# forward-op tally; tests use it to prove some code paths never ran
OP_COUNTS: Counter = Counter()


class ShapeError(ValueError):
    pass


def count_op(name: str, n: int = 1) -> None:
    OP_COUNTS[name] += n


def reset_op_counts() -> None:
    OP_COUNTS.clear()


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "_rg", "_parents", "_backward", "_id", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_creation)
        self.op = "leaf"
        self.name = name
        self._rg = False
        self.grad = None
        self.requires_grad = requires_grad

    # grad buffer exists exactly when a leaf requires grad
    @property
    def requires_grad(self) -> bool:
        return self._rg

    @requires_grad.setter
    def requires_grad(self, flag: bool) -> None:
        self._rg = bool(flag)
        if self.is_leaf:
            if self._rg and self.grad is None:
                self.grad = np.zeros_like(self.data)
            elif not self._rg:
                self.grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self._rg})"

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    OP_COUNTS[op] += 1
    out = Tensor.__new__(Tensor)
    out.data = data
    out._id = next(_creation)
    out.op = op
    out.name = ""
    out.grad = None
    if _grad_enabled and any(p._rg for p in parents):
        out._rg = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._rg = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a._rg else None,
                _unbroadcast(g, b.shape) if b._rg else None)

    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a._rg else None,
                _unbroadcast(-g, b.shape) if b._rg else None)

    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a._rg else None,
                _unbroadcast(g * a.data, b.shape) if b._rg else None)

    return _result(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a._rg else None,
                _unbroadcast(-g * out / b.data, b.shape) if b._rg else None)

    return _result(out, (a, b), "div", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), "gelu", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError(f"log: non-positive input (min {x.min():.3g})")
    return _result(np.log(x), (a,), "log", lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("sqrt: input must be strictly positive for a finite gradient")
    out = np.sqrt(x)
    return _result(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), "softplus", lambda g: (g * _stable_sigmoid(x),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.data
    mask = x >= lo
    return _result(np.where(mask, x, lo), (a,), "clamp_min", lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = gb = None
        if b.ndim == 1:
            if a._rg:
                ga = np.outer(g, B)
            if b._rg:
                gb = A.T @ g
        else:
            if a._rg:
                ga = g @ B.T
            if b._rg:
                gb = A.T @ g
        return ga, gb

    return _result(A @ B, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t._rg else None for p, t in zip(parts, ts))

    return _result(out, ts, "concat", bw)


def index_select(a: Tensor, axis: int, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"index_select: index out of range for axis {axis} of shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return _result(np.take(a.data, idx, axis=axis), (a,), "index_select", bw)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), "mean", bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), "log_softmax", bw)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)), eps)
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (a,), "l2_normalize", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    reduce_axes = tuple(range(x.ndim - 1))

    def bw(g):
        gx = gg = gb = None
        if x._rg:
            d = g * gain.data
            gx = inv * (d - d.mean(axis=-1, keepdims=True)
                        - xhat * (d * xhat).mean(axis=-1, keepdims=True))
        if gain._rg:
            gg = (g * xhat).sum(axis=reduce_axes)
        if bias._rg:
            gb = g.sum(axis=reduce_axes)
        return gx, gg, gb

    return _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", bw)


class DropoutRNG:
    """Counter-based mask source: call ``i`` draws from Philox keyed by (seed, i)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 64) - 1)
        self.counter = 0

    def uniform(self, shape) -> np.ndarray:
        key = (self.counter << 64) | self.seed
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key)).random(shape)


def dropout(a: Tensor, p: float, rng: DropoutRNG | None, training: bool) -> Tensor:
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout: training mode needs a DropoutRNG")
    mask = (rng.uniform(a.shape) >= p) / (1.0 - p)
    return _result(a.data * mask, (a,), "dropout", lambda g: (g * mask,))


# ---------------------------------------------------------------- backward


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Every grad-requiring node reachable from ``root``, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t._rg:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._id)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss._rg:
        return
    nodes = graph_nodes(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent._rg:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if not retain_graph:
        for node in nodes:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------- MBT1 files

_MAGIC = b"MBT1"
_F64 = 2


def tensor_to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    head = _MAGIC + struct.pack("<II", _F64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError("not an MBT1 tensor (bad magic)")
    dtype, ndim = struct.unpack_from("<II", buf, 4)
    if dtype != _F64:
        raise ValueError(f"unsupported MBT1 dtype code {dtype}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 12)
    start = 12 + 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) - start != 8 * count:
        raise ValueError(f"MBT1 payload holds {len(buf) - start} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=start).reshape(dims).astype(np.float64)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
