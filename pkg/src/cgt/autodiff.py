"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the transformer and the reference GNNs need are provided.
Every op records a closure mapping the output gradient to input gradients;
:func:`grad` walks the graph in reverse topological order.  Arrays keep their
dtype, so float64 inputs give float64 gradients for finite-difference checks.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def param(x, name=None) -> Tensor:
    return Tensor(np.asarray(x), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _op(data, parents, fn):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, parents, fn)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., k) @ (k, n): fold the leading axes into one GEMM
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[1])

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _op(out, (a, b), fn)

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _op(a.data @ b.data, (a, b), fn)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(np.asarray(out), (a,), fn)


def reshape(a: Tensor, shape) -> Tensor:
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def take(table: Tensor, idx) -> Tensor:
    """Row gather ``table[idx]``; the gradient scatter-adds back into the table."""
    idx = np.asarray(idx)

    def fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _op(table.data[idx], (table,), fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def fn(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _op(a.data[index], (a,), fn)


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _op(np.concatenate([p.data for p in parts], axis=axis), parts,
               lambda g: tuple(np.split(g, sizes, axis=axis)))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _op(a.data * keep, (a,), lambda g: (g * keep,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _op(a.data * factor, (a,), lambda g: (g * factor,))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_SQRT_2_OVER_PI)
    u = c * (x + x.dtype.type(0.044715) * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        du = c * (1.0 + 3 * x.dtype.type(0.044715) * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _op(out.astype(x.dtype), (a,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _op(out, (x, gamma, beta), fn)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; fully masked rows give 0."""
    mask = np.broadcast_to(mask, x.shape)
    z = np.where(mask, x.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(z - zmax), 0.0).astype(x.dtype)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / np.where(denom > 0, denom, 1.0)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _op(p, (x,), fn)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over the leading axes."""
    targets = np.asarray(targets)
    z = logits.data
    flat = z.reshape(-1, z.shape[-1])
    tgt = targets.reshape(-1)
    w = np.ones(tgt.shape, dtype=z.dtype) if weights is None else np.asarray(weights, z.dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        zero = np.zeros((), dtype=z.dtype)
        return _op(zero, (logits,), lambda g: (np.zeros_like(z),))
    zmax = flat.max(axis=1, keepdims=True)
    shifted = flat - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(tgt)), tgt]
    loss = np.asarray((w * nll).sum() / total, dtype=z.dtype)

    def fn(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(tgt)), tgt] -= 1.0
        return ((p * (w / total)[:, None] * g).reshape(z.shape).astype(z.dtype),)

    return _op(loss, (logits,), fn)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``."""
    if loss.data.size != 1:
        raise ValueError("grad needs a scalar output")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[id(node)] = g  # leaf: keep it
                continue
            for p, gp in zip(node.parents, node.backward_fn(g)):
                if not p.requires_grad or gp is None:
                    continue
                key = id(p)
                grads[key] = grads[key] + gp if key in grads else gp
    return [grads.get(id(t), np.zeros_like(t.data)).astype(t.dtype, copy=False) for t in wrt]
