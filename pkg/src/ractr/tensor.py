"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a graph node holding its parents and a closure that maps the
output gradient to parent gradients. backward() walks the graph once in
reverse topological order and accumulates gradients into leaf .grad arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Backpropagate from this scalar. Errors if re-run on the same node."""
        if self._backward_ran:
            raise RuntimeError("backward already ran on this node; build a fresh graph or reset first")
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        self._backward_ran = True

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            elif node.requires_grad:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward_fn=backward_fn if req else None)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _node(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape))]

    return _node(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape))]

    return _node(out_data, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two dims; leading dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return [(a, ga), (b, gb)]

    return _node(out_data, (a, b), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def bw(g):
        return [(a, g.transpose(inv))]

    return _node(out_data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out_data = a.data.reshape(shape)

    def bw(g):
        return [(a, g.reshape(orig))]

    return _node(out_data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.data.shape).copy())]
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return [(a, np.broadcast_to(gg, a.data.shape).copy())]

    return _node(out_data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        return [(a, g * out_data * (1.0 - out_data))]

    return _node(out_data, (a,), bw)


def tlog(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bw(g):
        return [(a, g / a.data)]

    return _node(out_data, (a,), bw)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        return [(a, g * out_data)]

    return _node(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bw(g):
        return [(a, g * (a.data > 0))]

    return _node(out_data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / _SQRT2))
    out_data = x * phi

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return [(a, g * (phi + x * pdf))]

    return _node(out_data, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)

    def bw(g):
        return [(a, g * ((a.data >= lo) & (a.data <= hi)))]

    return _node(out_data, (a,), bw)


def softmax_lastdim(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dim. mask: bool, broadcastable; False entries get
    exactly zero weight. A fully masked row is an error."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = xm.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise ValueError("softmax row fully masked (or non-finite logits)")
    e = np.exp(xm - m)
    s = e.sum(axis=-1, keepdims=True)
    out_data = e / s

    def bw(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return [(a, out_data * (g - inner))]

    return _node(out_data, (a,), bw)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def bw(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        t1 = dxhat.mean(axis=-1, keepdims=True)
        t2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (dxhat - t1 - xhat * t2)
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return [(a, ga), (gamma, ggamma), (beta, gbeta)]

    return _node(out_data, (a, gamma, beta), bw)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: out[... , :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("gather_rows: id out of table range")
    out_data = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return [(table, gt)]

    return _node(out_data, (table,), bw)


def stack(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return [(t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors)]

    return _node(out_data, tuple(tensors), bw)


def concat_lastdim(tensors: list[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[-1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=-1)

    def bw(g):
        outs = []
        off = 0
        for t, sz in zip(tensors, sizes):
            outs.append((t, g[..., off:off + sz]))
            off += sz
        return outs

    return _node(out_data, tuple(tensors), bw)


def where_mask(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select: cond ? a : b. cond is a plain bool array."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def bw(g):
        full = np.broadcast_to(cond, g.shape)
        return [(a, _unbroadcast(np.where(full, g, 0.0), a.data.shape)),
                (b, _unbroadcast(np.where(full, 0.0, g), b.data.shape))]

    return _node(out_data, (a, b), bw)


def token_at(a: Tensor, sample: int, field: int) -> Tensor:
    """Select one (sample, field) token from a (B, S, T, D) tensor -> (B, D)."""
    out_data = a.data[:, sample, field, :]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, sample, field, :] = g
        return [(a, ga)]

    return _node(out_data, (a,), bw)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
