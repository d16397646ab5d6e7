"""Minimal reverse-mode autodiff over numpy arrays.

Internal machinery for the self-distillation trainer: the encoder blocks
are written against these ops, which degrade to plain numpy when no input
is a Var, so the inference path pays no tape overhead. Gradients flow only
into Var-wrapped leaves (the student parameters); everything else is a
constant, which is also how the teacher's stop-gradient falls out.

Forward numerics delegate to tensor.py so the training path computes the
exact same values as inference.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from . import tensor as T

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    """Node in the gradient tape: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the tape, topologically."""
    if loss.value.shape != ():
        raise ValueError(f"backward requires a scalar, got shape {loss.value.shape}")
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.array(1.0)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def _unary(x, fwd, make_bwd):
    xv = value_of(x)
    out = fwd(xv)
    if not is_var(x):
        return out
    node = Var(out, parents=(x,))
    push = make_bwd(xv, out)

    def backward_fn(g):
        x.accumulate(push(g))

    node.backward_fn = backward_fn
    return node


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = T.matmul(av, bv)
    if not (is_var(a) or is_var(b)):
        return out
    node = Var(out, parents=tuple(x for x in (a, b) if is_var(x)))

    def backward_fn(g):
        if is_var(a):
            a.accumulate(np.matmul(g, bv.T.astype(np.float64)))
        if is_var(b):
            b.accumulate(np.matmul(av.T.astype(np.float64), g))

    node.backward_fn = backward_fn
    return node


def add(a, b):
    """Elementwise sum; a rank-1 b broadcasts across rows (bias add)."""
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (is_var(a) or is_var(b)):
        return out
    node = Var(out, parents=tuple(x for x in (a, b) if is_var(x)))

    def reduce_to(g, shape):
        if g.shape == shape:
            return g
        # broadcast ran over leading axes; sum them back out
        extra = g.ndim - len(shape)
        g = g.sum(axis=tuple(range(extra)))
        for axis, n in enumerate(shape):
            if n == 1 and g.shape[axis] != 1:
                g = g.sum(axis=axis, keepdims=True)
        return g

    def backward_fn(g):
        if is_var(a):
            a.accumulate(reduce_to(g, av.shape))
        if is_var(b):
            b.accumulate(reduce_to(g, bv.shape))

    node.backward_fn = backward_fn
    return node


def mul(a, b):
    """Elementwise (broadcastable) product."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (is_var(a) or is_var(b)):
        return out
    node = Var(out, parents=tuple(x for x in (a, b) if is_var(x)))

    def reduce_to(g, shape):
        if g.shape == shape:
            return g
        extra = g.ndim - len(shape)
        g = g.sum(axis=tuple(range(extra)))
        for axis, n in enumerate(shape):
            if n == 1 and g.shape[axis] != 1:
                g = g.sum(axis=axis, keepdims=True)
        return g

    def backward_fn(g):
        if is_var(a):
            a.accumulate(reduce_to(g * bv, av.shape))
        if is_var(b):
            b.accumulate(reduce_to(g * av, bv.shape))

    node.backward_fn = backward_fn
    return node


def scale(x, s: float):
    return _unary(x, lambda v: v * v.dtype.type(s), lambda xv, out: lambda g: g * s)


def transpose(x):
    return _unary(x, lambda v: v.T.copy(), lambda xv, out: lambda g: g.T)


def gelu(x):
    """Exact (erf-based) GELU."""

    def fwd(v):
        v64 = v.astype(np.float64)
        out = 0.5 * v64 * (1.0 + erf(v64 * _INV_SQRT2))
        return T.check_finite(out.astype(v.dtype), "gelu result")

    def make_bwd(xv, out):
        v64 = xv.astype(np.float64)
        deriv = 0.5 * (1.0 + erf(v64 * _INV_SQRT2)) + v64 * np.exp(-0.5 * v64 * v64) * _INV_SQRT_2PI
        return lambda g: g * deriv

    return _unary(x, fwd, make_bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    out = T.layer_norm(xv, gv, bv, eps)
    if not (is_var(x) or is_var(gamma) or is_var(beta)):
        return out
    node = Var(out, parents=tuple(v for v in (x, gamma, beta) if is_var(v)))

    x64 = xv.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x64.var(axis=-1, keepdims=True) + eps)
    y = (x64 - mean) / sigma

    def backward_fn(g):
        if is_var(gamma):
            gamma.accumulate((g * y).reshape(-1, y.shape[-1]).sum(axis=0))
        if is_var(beta):
            beta.accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if is_var(x):
            gy = g * gv.astype(np.float64)
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * y).mean(axis=-1, keepdims=True)
            x.accumulate((gy - m1 - y * m2) / sigma)

    node.backward_fn = backward_fn
    return node


def softmax_rows(x, temperature: float = 1.0):
    """Temperature softmax along the last axis."""

    def fwd(v):
        return T.softmax_last_dim(v, temperature)

    def make_bwd(xv, out):
        s = out.astype(np.float64)

        def push(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            return s * (g - dot) / temperature

        return push

    return _unary(x, fwd, make_bwd)


def log_softmax_rows(x, temperature: float = 1.0):
    """log(softmax(x / temperature)) along the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    def fwd(v):
        z = v.astype(np.float64) / temperature
        z -= z.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return T.check_finite(out.astype(v.dtype), "log_softmax result")

    def make_bwd(xv, out):
        s = np.exp(out.astype(np.float64))

        def push(g):
            return (g - s * g.sum(axis=-1, keepdims=True)) / temperature

        return push

    return _unary(x, fwd, make_bwd)


def concat_rows(parts):
    values = [value_of(p) for p in parts]
    out = np.concatenate([np.atleast_2d(v) for v in values], axis=0)
    if not any(is_var(p) for p in parts):
        return out
    node = Var(out, parents=tuple(p for p in parts if is_var(p)))
    row_counts = [np.atleast_2d(v).shape[0] for v in values]

    def backward_fn(g):
        offset = 0
        for part, rows in zip(parts, row_counts):
            piece = g[offset : offset + rows]
            if is_var(part):
                part.accumulate(piece.reshape(value_of(part).shape))
            offset += rows

    node.backward_fn = backward_fn
    return node


def concat_cols(parts):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=1)
    if not any(is_var(p) for p in parts):
        return out
    node = Var(out, parents=tuple(p for p in parts if is_var(p)))
    col_counts = [v.shape[1] for v in values]

    def backward_fn(g):
        offset = 0
        for part, cols in zip(parts, col_counts):
            if is_var(part):
                part.accumulate(g[:, offset : offset + cols])
            offset += cols

    node.backward_fn = backward_fn
    return node


def slice_rows(x, start: int, stop: int):
    def fwd(v):
        return v[start:stop].copy()

    def make_bwd(xv, out):
        def push(g):
            full = np.zeros(xv.shape, dtype=np.float64)
            full[start:stop] = g
            return full

        return push

    return _unary(x, fwd, make_bwd)


def slice_cols(x, start: int, stop: int):
    def fwd(v):
        return v[:, start:stop].copy()

    def make_bwd(xv, out):
        def push(g):
            full = np.zeros(xv.shape, dtype=np.float64)
            full[:, start:stop] = g
            return full

        return push

    return _unary(x, fwd, make_bwd)


def sum_all(x):
    def fwd(v):
        return np.asarray(v.astype(np.float64).sum(), dtype=v.dtype)

    def make_bwd(xv, out):
        return lambda g: np.broadcast_to(g, xv.shape)

    return _unary(x, fwd, make_bwd)


def mean_all(x):
    n = value_of(x).size
    return scale(sum_all(x), 1.0 / n)
