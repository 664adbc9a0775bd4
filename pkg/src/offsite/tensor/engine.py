"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` records the primitive that produced it and its inputs. Calling
``backward`` on a scalar walks that lineage in a fixed reverse-topological
order, so gradient accumulation is deterministic run to run. Gradients are
stored on leaves (tensors without lineage) that have ``requires_grad`` set,
and on intermediates that opted in with ``retain_grad``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class GradError(RuntimeError):
    """Misuse of the differentiation contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "retains_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.retains_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        self.retains_grad = True
        return self

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def backward(self):
        backward(self)

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = np.ascontiguousarray(x.data)

    def bw(g):
        return (kernels.gelu_bwd(xd, np.ascontiguousarray(g)),)

    return _make(kernels.gelu_fwd(xd), (x,), bw, "gelu")


# ------------------------------------------------------------------ reductions

def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g, dtype=dtype),)

    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


# --------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover last dim of {x.shape}")
    outs = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def bw(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[..., lo:hi] = g
            return (full,)

        outs.append(_make(x.data[..., lo:hi], (x,), bw, "slice"))
        start = hi
    return outs


# --------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or batched like ``a``."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ------------------------------------------------------------------ fused ops

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match last dim {d}")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    gd = np.ascontiguousarray(gain.data, dtype=x2.dtype)
    bd = np.ascontiguousarray(bias.data, dtype=x2.dtype)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gd, bd, float(eps))

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _make(y.reshape(shape), (x, gain, bias), bw, "layer_norm")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of [..., S, S] scores with future keys masked out."""
    if scores.shape[-1] != scores.shape[-2]:
        raise ShapeError(f"causal_softmax needs square trailing dims, got {scores.shape}")
    p = kernels.causal_softmax_fwd(np.ascontiguousarray(scores.data))

    def bw(g):
        return (kernels.causal_softmax_bwd(p, np.ascontiguousarray(g)),)

    return _make(p, (scores,), bw, "causal_softmax")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    v = logits.shape[-1]
    z = np.ascontiguousarray(logits.data.reshape(-1, v))
    if z.shape[0] != targets.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    n = z.shape[0]
    total, probs = kernels.xent_fwd(z, targets)
    shape = logits.shape

    def bw(g):
        return (kernels.xent_bwd(probs, targets, float(g) / n).reshape(shape),)

    return _make(np.asarray(total / n, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring leaf reachable from scalar ``loss``.

    Repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None or node.retains_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.backward_fn is None:
                continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
