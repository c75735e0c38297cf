"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
output gradient back into them. ``Tensor.backward`` walks the graph once in
reverse topological order. Leaf gradients accumulate until ``zero_grad``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import DimensionError, GraphError

_GRAD_ENABLED = True

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
LN_EPS = 1e-5


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._consumed = False

    @classmethod
    def _node(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out.op = op
        out._consumed = False
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        # gradients are never mutated in place, so sharing g is safe
        if self.grad is None:
            self.grad = g if g.shape == self.shape else np.reshape(g, self.shape)
        else:
            self.grad = self.grad + g

    # -- backward ---------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the forward pass first")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shape(a, b, op):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    # only one-sided broadcasting (bias rows, scalars) is supported
    if out is None or (out != a.shape and out != b.shape):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return out


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._node(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    c = float(c)

    def backward(g):
        a._accumulate(g * c)

    return Tensor._node(a.data * c, (a,), backward, "scale")


def gelu(a):
    """GELU, tanh approximation. Activation for every MLP in the model."""
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_K * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 1.0 - t * t
        d *= (3.0 * GELU_K) * x2 + 1.0
        d *= (0.5 * GELU_C) * x
        d += 0.5 * (1.0 + t)
        d *= g
        a._accumulate(d)

    return Tensor._node(out, (a,), backward, "gelu")


def elementwise(kind, a, b=None):
    """Dispatch by name: ``add``, ``sub``, ``scale_by_constant``, ``gelu``."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "scale_by_constant":
        return scale(a, b)
    if kind == "gelu":
        return gelu(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- linear algebra ---------------------------------------------------------
def matmul(a, b):
    """Matrix product; leading batch dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return Tensor._node(out, (a, b), backward, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._node(out, (a, b), backward, "matmul")


# -- shape ops --------------------------------------------------------------
def reshape(a, shape):
    shape = tuple(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return Tensor._node(np.transpose(a.data, axes), (a,), backward, "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape):
    shape = tuple(shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return Tensor._node(np.broadcast_to(a.data, shape).copy(), (a,), backward, "broadcast")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._node(out, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def getitem(a, idx):
    """Basic (view) indexing only; fancy indexing with repeats is not supported."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._node(np.array(out, dtype=np.float64), (a,), backward, "getitem")


# -- reductions -------------------------------------------------------------
def _check_axis(a, axis):
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def reduce_sum(a, axis=None):
    axis = _check_axis(a, axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return Tensor._node(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def reduce_mean(a, axis=None):
    axis = _check_axis(a, axis)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g / n, axis), a.shape))

    return Tensor._node(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def reduce_max(a, axis):
    """Max along ``axis``; the gradient goes to the first arg-max in index order."""
    axis = _check_axis(a, axis)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        a._accumulate(full)

    return Tensor._node(out, (a,), backward, "max")


def reduce(kind, a, axis):
    if kind == "mean":
        return reduce_mean(a, axis)
    if kind == "max":
        return reduce_max(a, axis)
    raise ValueError(f"unknown reduce kind {kind!r}")


# -- normalisation / probabilities ------------------------------------------
def softmax(a, axis=-1, mask=None):
    """Max-subtracted softmax. ``mask`` (bool, broadcastable) marks valid entries;
    masked entries get probability 0 and no gradient."""
    axis = _check_axis(a, axis)
    z = a.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return Tensor._node(s, (a,), backward, "softmax")


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    r = x.shape[-1]
    if r < 2:
        raise DimensionError(f"layer_norm needs a last dimension >= 2, got shape {x.shape}")
    if gain.shape != (r,) or bias.shape != (r,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {r}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=lead))
        bias._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            x._accumulate(dx)

    return Tensor._node(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(scores, target):
    """Negative log-likelihood of ``target`` under softmax(scores).

    ``scores`` of shape (K,) with an int target gives the per-example loss;
    shape (B, K) with B targets gives the batch mean.
    """
    single = scores.ndim == 1
    s = scores.data[None, :] if single else scores.data
    if s.ndim != 2:
        raise DimensionError(f"cross_entropy expects (K,) or (B, K) scores, got {scores.shape}")
    t = np.atleast_1d(np.asarray(target))
    if t.shape != (s.shape[0],) or not np.issubdtype(t.dtype, np.integer):
        raise IndexError(f"cross_entropy: need {s.shape[0]} integer target(s), got {target!r}")
    k = s.shape[1]
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"cross_entropy: target {target!r} out of range for {k} classes")
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    rows = np.arange(s.shape[0])
    losses = lse - s[rows, t]
    out = np.asarray(losses.mean())
    n = s.shape[0]

    def backward(g):
        p = np.exp(s - lse[:, None])
        p[rows, t] -= 1.0
        p *= g / n
        scores._accumulate(p[0] if single else p)

    return Tensor._node(out, (scores,), backward, "cross_entropy")


# -- testing utility --------------------------------------------------------
def grad_check(fn, x, step=1e-5):
    """Largest relative disagreement between autodiff and central differences.

    ``fn`` maps a Tensor to a scalar Tensor. The error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    fn(probe).backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            hi = base.copy().reshape(-1)
            lo = base.copy().reshape(-1)
            hi[i] += step
            lo[i] -= step
            f_hi = fn(Tensor(hi.reshape(base.shape))).item()
            f_lo = fn(Tensor(lo.reshape(base.shape))).item()
            flat[i] = (f_hi - f_lo) / (2.0 * step)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
