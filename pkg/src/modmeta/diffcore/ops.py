"""Differentiable ops.

Only explicit shapes are accepted: binary elementwise ops need equal shapes,
except that either operand may be a 0-d scalar.  Use :func:`broadcast_to`
and :func:`sum_to` when a real broadcast is intended.
"""
from __future__ import annotations

import numpy as np

from .node import Node, ShapeError, constant, make


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _binary_shapes(op, a: Node, b: Node):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (no implicit broadcasting)")


def _unbroadcast(g: Node, x: Node):
    # scalar operand of a scalar-tensor op
    if x.ndim == 0 and g.ndim != 0:
        return sum(g)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)
    return make(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a), _unbroadcast(neg(g), b)
    return make(a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("mul", a, b)

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b) if b.requires_grad else None
        return ga, gb
    return make(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("div", a, b)

    def vjp(g):
        ga = _unbroadcast(div(g, b), a) if a.requires_grad else None
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b) if b.requires_grad else None
        return ga, gb
    return make(a.value / b.value, (a, b), vjp, "div")


def neg(x) -> Node:
    x = _wrap(x)
    return make(-x.value, (x,), lambda g: (neg(g),), "neg")


def square(x) -> Node:
    x = _wrap(x)
    return make(x.value * x.value, (x,), lambda g: (mul(g, mul(2.0, x)),), "square")


def power(x, n: int) -> Node:
    """Integer power."""
    x = _wrap(x)
    n = int(n)
    if n == 0:
        return constant(np.ones_like(x.value))
    if n == 1:
        return x
    return make(x.value ** n, (x,), lambda g: (mul(g, mul(float(n), power(x, n - 1))),), f"pow{n}")


def tanh(x) -> Node:
    x = _wrap(x)
    out = None

    def vjp(g):
        return (mul(g, sub(1.0, square(out))),)
    out = make(np.tanh(x.value), (x,), vjp, "tanh")
    return out


def relu(x) -> Node:
    x = _wrap(x)
    mask = (x.value > 0).astype(np.float64)
    return make(x.value * mask, (x,), lambda g: (mul(g, constant(mask)),), "relu")


def sin(x) -> Node:
    x = _wrap(x)
    return make(np.sin(x.value), (x,), lambda g: (mul(g, cos(x)),), "sin")


def cos(x) -> Node:
    x = _wrap(x)
    return make(np.cos(x.value), (x,), lambda g: (neg(mul(g, sin(x))),), "cos")


def exp(x) -> Node:
    x = _wrap(x)
    out = None

    def vjp(g):
        return (mul(g, out),)
    out = make(np.exp(x.value), (x,), vjp, "exp")
    return out


def log(x) -> Node:
    x = _wrap(x)
    return make(np.log(x.value), (x,), lambda g: (div(g, x),), "log")


def sqrt(x) -> Node:
    x = _wrap(x)
    out = None

    def vjp(g):
        return (div(mul(g, 0.5), out),)
    out = make(np.sqrt(x.value), (x,), vjp, "sqrt")
    return out


def reciprocal(x) -> Node:
    x = _wrap(x)
    out = None

    def vjp(g):
        return (neg(mul(g, square(out))),)
    out = make(1.0 / x.value, (x,), vjp, "reciprocal")
    return out


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False) -> Node:  # noqa: A001 - mirrors numpy
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), x.shape),)
    return make(np.sum(x.value, axis=axes, keepdims=keepdims), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False) -> Node:
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    return div(sum(x, axis, keepdims), float(count))


def broadcast_to(x, shape) -> Node:
    """Explicit numpy-style broadcast; the reverse is :func:`sum_to`."""
    x = _wrap(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        value = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return make(value, (x,), lambda g: (sum_to(g, x.shape),), "broadcast_to")


def sum_to(x, shape) -> Node:
    x = _wrap(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1)
    for i, s in enumerate(shape):
        if s != 1 and x.shape[lead + i] != s:
            raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    value = np.sum(x.value, axis=axes, keepdims=True).reshape(shape)
    return make(value, (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Node:
    x = _wrap(x)
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    if value.shape == x.shape:
        return x
    return make(value, (x,), lambda g: (reshape(g, x.shape),), "reshape")


def transpose(x, axes=None) -> Node:
    """Permute axes; default swaps the last two."""
    x = _wrap(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need ndim >= 2, got shape {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(np.transpose(x.value, axes), (x,), lambda g: (transpose(g, inv),), "transpose")


def getitem(x, idx) -> Node:
    x = _wrap(x)
    value = x.value[idx]
    return make(value, (x,), lambda g: (_scatter(g, idx, x.shape),), "getitem")


def _scatter(g, idx, shape) -> Node:
    g = _wrap(g)
    value = np.zeros(shape)
    value[idx] = g.value
    return make(value, (g,), lambda gg: (getitem(gg, idx),), "scatter")


def concat(xs, axis=-1) -> Node:
    xs = [_wrap(x) for x in xs]
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * nd
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)
    return make(np.concatenate([x.value for x in xs], axis=ax), tuple(xs), vjp, "concat")


def stack(xs, axis=0) -> Node:
    xs = [_wrap(x) for x in xs]
    expanded = []
    for x in xs:
        shape = list(x.shape)
        shape.insert(axis % (x.ndim + 1), 1)
        expanded.append(reshape(x, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    """2-D matmul, or batched matmul with identical leading dimensions."""
    a, b = _wrap(a), _wrap(b)
    ok = a.ndim >= 2 and a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb
    return make(np.matmul(a.value, b.value), (a, b), vjp, "matmul")


def outer(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: need vectors, got {a.shape} and {b.shape}")
    return matmul(reshape(a, (a.shape[0], 1)), reshape(b, (1, b.shape[0])))


def affine(h, w, b) -> Node:
    """``h @ w.T + b`` over the last axis of ``h``.

    Shared weights: w is (out, in), b is (out,), h is (..., in).
    Per-task weights: w is (B, out, in), b is (B, out), h is (B, n, in).
    """
    h, w, b = _wrap(h), _wrap(w), _wrap(b)
    if w.ndim == 2:
        out_dim, in_dim = w.shape
        if h.shape[-1] != in_dim or b.shape != (out_dim,):
            raise ShapeError(f"affine: shapes h{h.shape} w{w.shape} b{b.shape} do not conform")
        value = h.value @ w.value.T + b.value
        lead = h.shape[:-1]

        def vjp(g):
            g2 = reshape(g, (-1, out_dim))
            gh = reshape(matmul(g2, w), h.shape) if h.requires_grad else None
            gw = matmul(transpose(g2), reshape(h, (-1, in_dim))) if w.requires_grad else None
            gb = sum(g2, axis=0) if b.requires_grad else None
            return gh, gw, gb
    elif w.ndim == 3:
        nb, out_dim, in_dim = w.shape
        if h.ndim != 3 or h.shape[0] != nb or h.shape[2] != in_dim or b.shape != (nb, out_dim):
            raise ShapeError(f"affine: shapes h{h.shape} w{w.shape} b{b.shape} do not conform")
        value = np.matmul(h.value, np.swapaxes(w.value, 1, 2)) + b.value[:, None, :]
        lead = h.shape[:-1]

        def vjp(g):
            gh = matmul(g, w) if h.requires_grad else None
            gw = matmul(transpose(g), h) if w.requires_grad else None
            gb = sum(g, axis=1) if b.requires_grad else None
            return gh, gw, gb
    else:
        raise ShapeError(f"affine: weight must be 2-D or 3-D, got {w.shape}")
    assert value.shape == lead + (out_dim,)
    return make(value, (h, w, b), vjp, "affine")
