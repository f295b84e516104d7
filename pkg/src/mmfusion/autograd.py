"""Define-by-run reverse-mode differentiation.

Every differentiable operation appends a :class:`Node` to a :class:`Tape`.
Node ids are dense and parents always precede children, so a reverse sweep
over ids is a valid topological order. Ops accept an optional leading batch
dimension and numpy-style broadcasting; gradients are summed back to each
parent's shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonScalarLoss, UnknownParent

CE_CLAMP = 1e-12


class Node:
    __slots__ = ("id", "op_kind", "parent_ids", "value", "grad", "backward_fn")

    def __init__(self, id, op_kind, parent_ids, value, backward_fn=None):
        self.id = id
        self.op_kind = op_kind
        self.parent_ids = list(parent_ids)
        self.value = value
        self.grad = np.zeros_like(value)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.id}, {self.op_kind!r}, parents={self.parent_ids}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op_kind: str, parents: Sequence[int], value, backward_fn=None) -> int:
        n = len(self.nodes)
        for p in parents:
            if not 0 <= p < n:
                raise UnknownParent(p)
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(n, op_kind, parents, value, backward_fn))
        return n

    def leaf(self, value, op_kind: str = "leaf") -> "Var":
        return Var(self, self.record(op_kind, [], value))

    def zero_grad(self):
        for node in self.nodes:
            node.grad[...] = 0.0


def backward(tape: Tape, loss_id: int) -> None:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every node.

    Contributions are gathered in a scratch buffer and added at the end, so
    calling this twice without zeroing gives exactly twice the gradients.
    """
    loss = tape.nodes[loss_id]
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    buf: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.value)}
    for nid in range(loss_id, -1, -1):
        g = buf.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None or not node.parent_ids:
            continue
        for pid, pg in zip(node.parent_ids, node.backward_fn(g)):
            if pg is None:
                continue
            if pid in buf:
                buf[pid] = buf[pid] + pg
            else:
                buf[pid] = pg
    for nid, g in buf.items():
        tape.nodes[nid].grad += g


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


class Var:
    """Handle on a tape node, with operator sugar."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def grad(self) -> np.ndarray:
        return self.tape.nodes[self.id].grad

    @property
    def shape(self):
        return self.value.shape

    def backward(self):
        backward(self.tape, self.id)

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.tape.leaf(np.asarray(other, dtype=np.float64), "const")

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, self._lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _new(op_kind, parents: Sequence[Var], value, backward_fn) -> Var:
    tape = parents[0].tape
    return Var(tape, tape.record(op_kind, [p.id for p in parents], value, backward_fn))


# --- elementwise ---------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return _new("add", [a, b], a.value + b.value,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return _new("sub", [a, b], a.value - b.value,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _new("mul", [a, b], av * bv,
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _new("div", [a, b], av / bv,
                lambda g: (_unbroadcast(g / bv, av.shape),
                           _unbroadcast(-g * av / (bv * bv), bv.shape)))


def scale(a: Var, c: float) -> Var:
    return _new("scale", [a], a.value * c, lambda g: (g * c,))


def relu(a: Var) -> Var:
    # subgradient 0 at exactly 0; maximum keeps NaN visible
    mask = a.value > 0
    return _new("relu", [a], np.maximum(a.value, 0.0), lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _new("tanh", [a], y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-a.value))
    return _new("sigmoid", [a], y, lambda g: (g * y * (1.0 - y),))


def identity(a: Var) -> Var:
    return a


ACTIVATIONS = {"identity": identity, "relu": relu, "tanh": tanh, "sigmoid": sigmoid}


# --- linear algebra and shape --------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    """``numpy.matmul`` semantics for rank >= 2 operands."""
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _new("matmul", [a, b], av @ bv, bw)


def transpose(a: Var) -> Var:
    return _new("transpose", [a], np.swapaxes(a.value, -1, -2),
                lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _new("reshape", [a], a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    vals = [p.value for p in parts]
    sizes = [v.shape[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]
    return _new("concat", list(parts), np.concatenate(vals, axis=axis),
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(parts: Sequence[Var], axis: int = 0) -> Var:
    n = len(parts)
    return _new("stack", list(parts), np.stack([p.value for p in parts], axis=axis),
                lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take(a: Var, index: int, axis: int) -> Var:
    """Select one position along ``axis`` (the axis is removed)."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _new("take", [a], np.take(a.value, index, axis=axis), bw)


def mean(a: Var, axis: int) -> Var:
    shape = a.shape
    n = shape[axis]
    return _new("mean", [a], a.value.mean(axis=axis),
                lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return _new("sum", [a], np.array([a.value.sum()]),
                lambda g: (np.full(shape, g.reshape(-1)[0]),))


def softmax(a: Var) -> Var:
    """Softmax over the last axis."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _new("softmax", [a], y, bw)


# --- convolution, pooling, embedding --------------------------------------


def conv2d(x: Var, kernels: Var, bias: Var, stride: int = 1, padding: int = 0) -> Var:
    """Batched 2-D cross-correlation. ``x`` is [N, C, H, W], kernels [O, C, F, F]."""
    xv, kv = x.value, kernels.value
    n, c, h, w = xv.shape
    o, _, f, _ = kv.shape
    s, p = stride, padding
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (f, f), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    out = np.einsum("nchwij,ocij->nohw", win, kv, optimize=True) + bias.value[None, :, None, None]

    def bw(g):
        gk = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros_like(xp)
        for i in range(f):
            for j in range(f):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.einsum(
                    "nohw,oc->nchw", g, kv[:, :, i, j])
        return gxp[:, :, p:p + h, p:p + w], gk, gb

    return _new("conv2d", [x, kernels, bias], out, bw)


def max_pool(x: Var, window: int, stride: int) -> Var:
    """Max pool over the last two axes; ties go to the first row-major index."""
    xv = x.value
    lead = xv.shape[:-2]
    win = np.lib.stride_tricks.sliding_window_view(xv, (window, window), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :]
    ho, wo = win.shape[-4], win.shape[-3]
    flat = win.reshape(*lead, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj

    def bw(g):
        gx = np.zeros_like(xv)
        gx2 = gx.reshape(-1, *xv.shape[-2:])
        r = rows.reshape(-1, ho, wo)
        cc = cols.reshape(-1, ho, wo)
        b = np.broadcast_to(np.arange(gx2.shape[0])[:, None, None], r.shape)
        np.add.at(gx2, (b, r, cc), g.reshape(-1, ho, wo))
        return (gx,)

    return _new("max_pool", [x], out, bw)


def embedding(table: Var, tokens) -> Var:
    tokens = np.asarray(tokens, dtype=np.int64)
    tv = table.value

    def bw(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, tokens.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return _new("embedding", [table], tv[tokens], bw)


def patches(images: Var, grid: int = 3) -> Var:
    """[N, H, W] -> [N, grid*grid, (H/grid)*(W/grid)], patches and pixels row-major."""
    n, h, w = images.shape
    ph, pw = h // grid, w // grid

    def fwd(v):
        return v.reshape(n, grid, ph, grid, pw).transpose(0, 1, 3, 2, 4).reshape(n, grid * grid, ph * pw)

    def bw(g):
        return (g.reshape(n, grid, grid, ph, pw).transpose(0, 1, 3, 2, 4).reshape(n, h, w),)

    return _new("patches", [images], fwd(images.value), bw)


def cross_entropy(probs: Var, labels) -> Var:
    """Mean over the batch of ``-ln(max(p[label], 1e-12))``; returns shape [1]."""
    pv = probs.value
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    p2 = pv.reshape(len(labels), -1)
    picked = p2[np.arange(len(labels)), labels]
    clamped = np.maximum(picked, CE_CLAMP)
    loss = -np.log(clamped).mean()

    def bw(g):
        gp = np.zeros_like(p2)
        live = picked > CE_CLAMP
        gp[np.arange(len(labels)), labels] = np.where(live, -1.0 / clamped, 0.0) / len(labels)
        return (gp.reshape(pv.shape) * g.reshape(-1)[0],)

    return _new("cross_entropy", [probs], np.array([loss]), bw)
