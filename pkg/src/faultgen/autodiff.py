"""Dense-tensor arithmetic with reverse-mode differentiation.

A small tape-based engine over numpy arrays, covering exactly the op
vocabulary the denoiser, adapter, losses, and evaluation networks need:
matmul, elementwise arithmetic, softmax, layer_norm, gelu, slicing/concat,
reductions, padding, and a fused cross-entropy. Tensors are immutable
values once created; gradients accumulate on leaves during `backward`.

Training runs in float32; a float64 mode (`set_dtype` / `precision`) exists
for finite-difference verification.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DTYPE = np.float32
_STATE = threading.local()  # per-thread grad flag so eval workers can't race


def set_dtype(dtype) -> None:
    """Set the default dtype for newly created tensors ('float32'|'float64')."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DTYPE = dt.type


def default_dtype():
    return np.dtype(_DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (used for 64-bit gradient checks)."""
    global _DTYPE
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / sampling)."""
    old = grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = old


def grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class Tensor:
    """Immutable value node. `data` is a numpy array; `grad` fills in on backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Named, trainable leaf. Frozen parameters never accumulate gradient."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = self.trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


# ----------------------------------------------------------------------
# op plumbing


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_finite(data, op: str):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")


def _node(data, op: str, parents, backward_fn):
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + np.asarray(g, dtype=t.data.dtype)


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) on every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    # iterative topological sort (graphs can be a few hundred nodes deep)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ----------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, "add", (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, "sub", (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, "mul", (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, "div", (a, b), bw)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _node(data, "absolute", (a,), bw)


def minimum(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(a, cap) against a constant; gradient flows where a <= cap."""
    data = np.minimum(a.data, cap)

    def bw(g):
        _accum(a, g * (a.data <= cap))

    return _node(data, "minimum", (a,), bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        _accum(a, g * local)

    return _node(data, "gelu", (a,), bw)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _node(data, "matmul", (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _node(y, "softmax", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def bw(g):
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _node(data, "layer_norm", (x, gain, bias), bw)


# ----------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(data, "reshape", (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _node(data, "transpose", (a,), bw)


def take(a: Tensor, key) -> Tensor:
    """Basic slicing / integer indexing; gradient scatters back into place."""
    data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accum(a, full)

    return _node(data, "take", (a,), bw)


def pad(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    if before < 0 or after < 0:
        raise ContractError("pad amounts must be >= 0")
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(before, before + a.data.shape[axis])
    idx = tuple(idx)

    def bw(g):
        _accum(a, g[idx])

    return _node(data, "pad", (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _node(data, "concat", tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _node(data, "stack", tuple(tensors), bw)


# ----------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _node(data, "sum", (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def bw(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _node(data, "mean", (a,), bw)


# ----------------------------------------------------------------------
# fused classification loss (evaluation networks)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; `labels` is an int array of shape (B,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B,C) logits and (B,) labels, got {logits.shape} / {labels.shape}")
    z = logits.data
    zmax = np.max(z, axis=1, keepdims=True)
    logsum = zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))
    logp = z - logsum
    n = z.shape[0]
    data = -np.mean(logp[np.arange(n), labels])

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, g * p / n)

    return _node(np.asarray(data, dtype=z.dtype), "cross_entropy", (logits,), bw)
