"""Graph nodes and the reverse-mode gradient routine.

A :class:`Node` holds an immutable float64 value, the nodes it was computed
from, and a vector-Jacobian product closure.  VJP closures are written in
terms of the same differentiable ops used in the forward pass, so running
:func:`grad` with ``create_graph=True`` yields gradients that are themselves
graph nodes and can be differentiated again.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

# input-grad inside a loss -> parameter grad -> meta-grad
MAX_ORDER = 3


class ShapeError(ValueError):
    pass


class GradError(RuntimeError):
    pass


class UnsupportedDepthError(GradError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _Mode(threading.local):
    def __init__(self):
        self.enabled = True
        self.order = 0
        self.checked = False


_mode = _Mode()


@contextlib.contextmanager
def no_grad():
    """Ops inside this block produce constants (no parents are recorded)."""
    prev = _mode.enabled
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


@contextlib.contextmanager
def checked(flag: bool = True):
    """Reject NaN/Inf at every node construction while active."""
    prev = _mode.checked
    _mode.checked = flag
    try:
        yield
    finally:
        _mode.checked = prev


def as_tensor(data, shape=None) -> np.ndarray:
    """Validate and copy ``data`` into a read-only float64 array."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative extent in shape {shape}")
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "order", "op", "name", "__weakref__")

    def __init__(self, value, parents=(), vjp=None, op="const", requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if _mode.checked and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.order = _mode.order
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Node(op={self.op}, shape={self.shape}, order={self.order}{tag})"

    # operator sugar; definitions live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def leaf(value, name=None, requires_grad=True) -> Node:
    """A differentiable input or parameter."""
    return Node(as_tensor(value), op="leaf", requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=np.float64))


def make(value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
    """Record an op result; drops the graph edge when nothing needs grad."""
    if _mode.enabled and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), vjp, op, requires_grad=True)
    return Node(value, op=op)


def _topo(output: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(output, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Node, wrt: Iterable[Node], create_graph: bool = False) -> list[Node]:
    """Gradient of a scalar ``output`` with respect to each node in ``wrt``.

    Nodes in ``wrt`` need not be leaves; traversal is confined to nodes that
    depend on some member of ``wrt``.  Unreachable members get exact zeros.
    With ``create_graph`` the returned nodes carry their own graph.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise GradError(f"grad needs a scalar output, got shape {output.shape}")
    targets = {id(w) for w in wrt}
    topo = _topo(output) if output.requires_grad else []
    relevant = set()
    for node in topo:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    if create_graph:
        deepest = max((n.order for n in topo if id(n) in relevant and n.vjp is not None), default=-1)
        if deepest + 1 > MAX_ORDER:
            raise UnsupportedDepthError(
                f"create_graph would build order-{deepest + 1} nodes; at most {MAX_ORDER} nesting levels "
                "are supported (use a first-order variant)")

    grads: dict[int, Node] = {}
    found: dict[int, Node] = {}
    if id(output) in relevant:
        grads[id(output)] = Node(np.ones_like(output.value))

    prev = (_mode.enabled, _mode.order)
    _mode.enabled = create_graph
    try:
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in targets:
                found[id(node)] = g
            if node.vjp is None:
                continue
            _mode.order = node.order + 1
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in relevant:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else _accumulate(acc, pg)
    finally:
        _mode.enabled, _mode.order = prev

    out = []
    for w in wrt:
        g = found.get(id(w))
        out.append(g if g is not None else Node(np.zeros_like(w.value)))
    return out


def _accumulate(a: Node, b: Node) -> Node:
    from . import ops
    return ops.add(a, b)


def value_and_grad(fn: Callable[..., Node], *args: Node):
    out = fn(*args)
    return out.value.item(), [g.value for g in grad(out, args)]
