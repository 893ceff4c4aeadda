"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the segmentation network needs are provided. Each op
computes its output eagerly and, when a :class:`Tape` is attached and any
input requires a gradient, records a closure mapping the output gradient to
input gradients. :meth:`Tape.backward` replays the records in reverse.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Var:
    __slots__ = ("data", "grad", "tape", "requires_grad", "name")

    def __init__(self, data, tape: Optional["Tape"] = None, requires_grad: bool = False, name: str = ""):
        self.data = data
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var({self.name or '?'}, shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Records differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[tuple[Var, Sequence[Var], Callable]] = []

    def leaf(self, data, name: str = "") -> Var:
        return Var(data, self, requires_grad=True, name=name)

    def backward(self, out: Var, seed: np.ndarray) -> None:
        out.grad = np.asarray(seed, dtype=out.data.dtype).reshape(out.data.shape)
        for node, inputs, fn in reversed(self.records):
            if node.grad is None:
                continue
            grads = fn(node.grad)
            for var, g in zip(inputs, grads):
                if g is None or not var.requires_grad:
                    continue
                if var.grad is None:
                    var.grad = g
                else:
                    var.grad = var.grad + g
            node.grad = None  # free intermediate memory
        # records form reference cycles through their output Vars; drop them
        # so activations are released without waiting for the cycle collector
        self.records.clear()


def const(data) -> Var:
    return Var(data)


def _tape_of(*vars: Var) -> Optional[Tape]:
    for v in vars:
        if v.tape is not None and v.requires_grad:
            return v.tape
    return None


def _emit(data, inputs: Sequence[Var], backward: Callable, name: str = "") -> Var:
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(data, name=name)
    out = Var(data, tape, requires_grad=True, name=name)
    tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.data.shape, b.data.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Var, b: Var) -> Var:
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), back)


def relu(x: Var) -> Var:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def linear(x: Var, w: Var, b: Optional[Var] = None) -> Var:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, wd.shape[1])

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, back)


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    c = xd.shape[-1]

    def back(g):
        gg = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        dgamma = (gg * xh).sum(axis=0)
        dbeta = gg.sum(axis=0)
        dxhat = gg * gamma.data
        dx = inv.reshape(-1, 1) * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xh * (dxhat * xh).mean(axis=1, keepdims=True)
        )
        return dx.reshape(xd.shape), dgamma, dbeta

    return _emit(out.astype(xd.dtype), (x, gamma, beta), back)


def scatter_rows(g: np.ndarray, index: np.ndarray, rows: int) -> np.ndarray:
    """Sum rows of ``g`` (shape ``index.shape + (C,)``) into ``rows`` buckets."""
    c = g.shape[-1]
    flat = index.reshape(-1)
    g2 = g.reshape(-1, c)
    out = np.empty((rows, c), dtype=g.dtype)
    for j in range(c):
        out[:, j] = np.bincount(flat, weights=g2[:, j], minlength=rows)
    return out


def gather(x: Var, index: np.ndarray) -> Var:
    """Rows of a 2-D ``x`` at integer ``index`` (any shape)."""
    xd = x.data
    rows = xd.shape[0]
    return _emit(xd[index], (x,), lambda g: (scatter_rows(g, index, rows),))


def softmax(x: Var, axis: int) -> Var:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (x,), back)


def group_weighted_sum(w: Var, v: Var) -> Var:
    """``out[n, g*d + c] = sum_k w[n, k, g] * v[n, k, g*d + c]``."""
    wd, vd = w.data, v.data
    n, k, groups = wd.shape
    channels = vd.shape[-1]
    d = channels // groups
    v4 = vd.reshape(n, k, groups, d)
    out = np.einsum("nkg,nkgd->ngd", wd, v4, optimize=True).reshape(n, channels)

    def back(g):
        g3 = g.reshape(n, groups, d)
        gw = np.einsum("ngd,nkgd->nkg", g3, v4, optimize=True)
        gv = (wd[..., None] * g3[:, None, :, :]).reshape(n, k, channels)
        return gw, gv

    return _emit(out, (w, v), back)


def segment_max(x: Var, segment: np.ndarray, num_segments: int) -> Var:
    """Per-segment elementwise max of the rows of ``x``.

    Every segment id in ``0..num_segments-1`` must occur at least once. The
    gradient flows to the first row (in index order) attaining the max.
    """
    xd = x.data
    order = np.argsort(segment, kind="stable")
    seg_sorted = segment[order]
    starts = np.flatnonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])
    if len(starts) != num_segments:
        raise ValueError("every segment must have at least one member")
    xs = xd[order]
    out = np.maximum.reduceat(xs, starts, axis=0)

    def back(g):
        hit = xs == out[seg_sorted]
        pos = np.where(hit, np.arange(len(xs))[:, None], len(xs))
        first = np.minimum.reduceat(pos, starts, axis=0)  # (segments, C)
        gx = np.zeros_like(xd)
        cols = np.broadcast_to(np.arange(xd.shape[1]), first.shape)
        gx[order[first], cols] = g
        return (gx,)

    return _emit(out, (x,), back)


def sum_all(x: Var) -> Var:
    shape = x.data.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; the floor absorbs tensors whose
    true gradient is zero, where finite differences only return rounding noise."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_gradient(loss, x: np.ndarray, eps: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of ``loss()`` with respect to ``x`` (perturbed in place).

    Only entries in ``indices`` (flat) are probed; the rest are returned as 0.
    """
    flat = x.reshape(-1)
    out = np.zeros(flat.size, np.float64)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        up = loss()
        flat[i] = orig - eps
        down = loss()
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(x.shape)
