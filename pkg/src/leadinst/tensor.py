"""Minimal dense tensors with define-by-run reverse-mode autodiff.

Every op records its parents and a closure mapping the upstream gradient to
one gradient per parent. ``Tensor.backward`` walks the recorded graph in
reverse topological order and sums gradients over all consumers of a node.
Only leaf tensors created with ``requires_grad=True`` keep a ``.grad``.

Data are always float64 numpy arrays. Broadcasting is limited to what the
model needs: ``add`` accepts a 1-D right operand matching the last axis
(bias), and ``mul`` accepts a python scalar.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels
from .errors import IndexLookupError, LabelError, ParameterError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def add(a, b):
    """Elementwise sum; ``b`` may also be 1-D matching ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Elementwise product of equal-shape tensors, or tensor times scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating)):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a, b):
    """2-D matrix product ``a (M, K) @ b (K, N)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    D = x.shape[-1]
    if D < 1 or gain.shape != (D,) or bias.shape != (D,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


def dropout(x, p, training, rng):
    """Inverted dropout; identity in eval mode or when ``p == 0``.

    Draws exactly one ``rng.random(x.shape)`` call per training invocation
    with ``p > 0``.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    T, C = logits.shape
    if T == 0:
        raise ShapeError("cross_entropy: no frames")
    if targets.min() < 0 or targets.max() >= C:
        raise LabelError(f"cross_entropy: targets must lie in [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(T)
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / T),)

    return _make(np.array(loss), (logits,), backward)


def embedding(table, idx):
    """Row lookup ``table[idx]``; ``idx`` an int or an integer array."""
    table = _as_tensor(table)
    idx_arr = np.asarray(idx, dtype=np.int64)
    V = table.shape[0]
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= V):
        raise IndexLookupError(f"embedding index out of range [0, {V})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx_arr, g)
        return (gt,)

    return _make(table.data[idx_arr], (table,), backward)


def sum_all(x):
    x = _as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x, axis=None):
    x = _as_tensor(x)
    if axis is None:
        n = x.data.size
        return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n),))
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), backward)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def expand(x, axis, n):
    """Insert ``axis`` and repeat ``x`` ``n`` times along it."""
    x = _as_tensor(x)
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(data, (x,), lambda g: (g.sum(axis=axis),))


def concat(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def stack(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, backward)


def index(x, idx):
    """Numpy-style indexing; the gradient scatters back with ``np.add.at``."""
    x = _as_tensor(x)

    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx))

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(x.data[idx]), (x,), backward)


def frame_attention(q, k, v, heads):
    """Multi-head dot-product attention computed independently per frame.

    ``q`` is (T, D); ``k`` and ``v`` are (N, T, D), one slab per key/value
    source. At every frame each head scores the N sources with
    ``q·k / sqrt(D/heads)``, normalizes with a softmax over N and returns the
    weighted sum of the values. Returns ``(out (T, D), weights (H, T, N))``;
    the weights are a plain array and carry no gradient.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.ndim != 2 or k.ndim != 3 or k.shape != v.shape or k.shape[1:] != q.shape:
        raise ShapeError(f"frame_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if heads < 1 or q.shape[1] % heads:
        raise ShapeError(f"frame_attention: D={q.shape[1]} not divisible by heads={heads}")
    out, w = kernels.attention_forward(q.data, k.data, v.data, heads)

    def backward(g):
        return kernels.attention_backward(q.data, k.data, v.data, w, g, heads)

    return _make(out, (q, k, v), backward), w


def numerical_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f()`` wrt array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g
