"""Reverse-mode automatic differentiation over dense float64 tensors.

Graphs are built define-by-run: every op returns a Node holding its value
(a C-contiguous float64 ndarray), references to its inputs and a closure
computing the adjoints. ``backward`` on a scalar node walks the graph in
reverse topological order and returns a gradient per reachable Parameter.

Overflow is never trapped: ops run under ``np.errstate`` so an exploding
value shows up as inf/nan in the output where callers can detect it.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction and traversal errors."""


class ShapeError(AutodiffError):
    """Operands have incompatible shapes."""


class GraphError(AutodiffError):
    """Graph contract violated (non-scalar backward, reuse, missing adjoint)."""


class NumericError(AutodiffError):
    """A computation that must stay finite produced inf or nan."""


def _as_array(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


class Node:
    """One vertex of the computation graph.

    ``adjoint`` maps the gradient at this node to a tuple of gradients,
    one per input, each matching that input's value shape.
    """

    __slots__ = ("value", "op", "inputs", "grad", "adjoint", "param")

    def __init__(self, value, op="const", inputs=(), adjoint=None, param=None):
        self.value = value
        self.op = op
        self.inputs = tuple(inputs)
        self.grad = None
        self.adjoint = adjoint
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Parameter:
    """A named tensor with an optional entrywise non-negativity constraint.

    The constraint is an invariant of the stored value, not of gradients:
    an optimizer may transiently violate it inside its update as long as it
    re-projects before the value is used in a forward pass again.
    """

    def __init__(self, name: str, value, non_negative: bool = False):
        self.name = name
        self.value = _as_array(value)
        self.non_negative = bool(non_negative)
        if self.non_negative and self.value.size and self.value.min() < 0.0:
            raise ValueError(f"parameter {name!r} flagged non-negative but holds negative entries")

    def leaf(self) -> Node:
        """Fresh graph leaf bound to this parameter's current value."""
        return Node(self.value, op="param", param=self)

    def project(self) -> None:
        """Clamp to the constraint set (no-op for unconstrained parameters)."""
        if self.non_negative:
            np.maximum(self.value, 0.0, out=self.value)

    def copy(self) -> "Parameter":
        return Parameter(self.name, self.value.copy(), self.non_negative)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, non_negative={self.non_negative})"


def constant(x) -> Node:
    """Leaf carrying a constant value; receives no gradient entry."""
    return Node(_as_array(x), op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(op, a, b, fn, adj):
    a, b = as_node(a), as_node(b)
    try:
        with np.errstate(all="ignore"):
            value = fn(a.value, b.value)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} are not broadcastable")

    def adjoint(g):
        ga, gb = adj(g, a.value, b.value, value)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return Node(value, op, (a, b), adjoint)


def add(a, b) -> Node:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y, v: (g, g))


def sub(a, b) -> Node:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y, v: (g, -g))


def mul(a, b) -> Node:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y, v: (g * y, g * x))


def div(a, b) -> Node:
    return _binary("div", a, b, lambda x, y: x / y, lambda g, x, y, v: (g / y, -g * x / (y * y)))


def _unary(op, a, fn, adj):
    a = as_node(a)
    with np.errstate(all="ignore"):
        value = fn(a.value)

    def adjoint(g):
        return (adj(g, a.value, value),)

    return Node(value, op, (a,), adjoint)


def neg(a) -> Node:
    return _unary("neg", a, lambda x: -x, lambda g, x, v: -g)


def relu(a) -> Node:
    # Subgradient at exactly 0 is 0: the strict inequality below encodes it.
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda g, x, v: g * (x > 0.0))


def exp(a) -> Node:
    return _unary("exp", a, np.exp, lambda g, x, v: g * v)


def sigmoid(a) -> Node:
    def fn(x):
        return 1.0 / (1.0 + np.exp(-x))

    return _unary("sigmoid", a, fn, lambda g, x, v: g * v * (1.0 - v))


def tanh(a) -> Node:
    return _unary("tanh", a, np.tanh, lambda g, x, v: g * (1.0 - v * v))


def sqrt(a) -> Node:
    return _unary("sqrt", a, np.sqrt, lambda g, x, v: g / (2.0 * v))


def scale(a, c: float) -> Node:
    c = float(c)
    return _unary("scale", a, lambda x: x * c, lambda g, x, v: g * c)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {av.shape} x {bv.shape}")
    with np.errstate(all="ignore"):
        value = av @ bv

    def adjoint(g):
        ga = g @ bv.swapaxes(-1, -2)
        gb = av.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(value, "matmul", (a, b), adjoint)


def transpose(a) -> Node:
    """Swap the last two axes."""
    a = as_node(a)
    if a.value.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {a.value.shape}")
    return _unary("transpose", a, lambda x: x.swapaxes(-1, -2),
                  lambda g, x, v: g.swapaxes(-1, -2))


def _check_axis(a, axis):
    if axis is not None and not (-a.value.ndim <= axis < a.value.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.value.shape}")


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    _check_axis(a, axis)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Node(np.asarray(value), "sum", (a,), adjoint)


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    _check_axis(a, axis)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.shape[axis]

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy() / count,)

    return Node(np.asarray(value), "mean", (a,), adjoint)


def reduce_max(a, axis=None, keepdims=False) -> Node:
    """Max reduction; the adjoint routes to the first maximal entry
    (lowest index) so tied maxima have a deterministic subgradient."""
    a = as_node(a)
    _check_axis(a, axis)
    value = a.value.max(axis=axis, keepdims=keepdims)

    def adjoint(g):
        mask = np.zeros_like(a.value)
        if axis is None:
            mask.flat[int(np.argmax(a.value))] = 1.0
            return (mask * g,)
        idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return Node(np.asarray(value), "max", (a,), adjoint)


def concat(parts, axis: int) -> Node:
    parts = [as_node(p) for p in parts]
    try:
        value = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.value.shape for p in parts]} on axis {axis}")
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return Node(value, "concat", parts, adjoint)


def narrow(a, axis: int, start: int, length: int) -> Node:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    a = as_node(a)
    _check_axis(a, axis)
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    if a.value.shape[axis] < start + length:
        raise ShapeError(f"narrow: [{start}, {start + length}) exceeds axis {axis} of {a.value.shape}")
    value = np.ascontiguousarray(a.value[index])

    def adjoint(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return Node(value, "narrow", (a,), adjoint)


def reshape(a, shape) -> Node:
    a = as_node(a)
    shape = tuple(shape)
    return _unary("reshape", a, lambda x: np.ascontiguousarray(x.reshape(shape)),
                  lambda g, x, v: g.reshape(x.shape))


def topo_order(output: Node) -> list:
    """Iterative post-order DFS; recursion would overflow on long rollouts."""
    order, seen, stack = [], set(), [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Node) -> dict:
    """Accumulate d(output)/d(parameter) for every reachable Parameter.

    ``output`` must be scalar-valued. Each graph supports exactly one
    backward call; build a fresh forward pass to differentiate again.
    """
    if output.value.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.value.shape}")
    if output.grad is not None:
        raise GraphError("graph already consumed by a previous backward call")

    order = topo_order(output)
    output.grad = np.ones_like(output.value)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.param is not None:
            acc = grads.get(node.param.name)
            grads[node.param.name] = node.grad.copy() if acc is None else acc + node.grad
        if not node.inputs:
            continue
        if node.adjoint is None:
            raise GraphError(f"op {node.op!r} has no registered adjoint")
        with np.errstate(all="ignore"):
            contribs = node.adjoint(node.grad)
        for parent, g in zip(node.inputs, contribs):
            if g is None:
                continue
            if g.shape != parent.value.shape:
                raise GraphError(f"adjoint of {node.op!r} produced shape {g.shape} "
                                 f"for input of shape {parent.value.shape}")
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad += g
    return grads


def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between the graph gradient of ``f`` and central
    finite differences, coordinate by coordinate.

    ``f`` maps a Node of x's shape to a scalar Node. Non-finite values from
    ``f`` are a hard error: the check is meaningless on an overflowed graph.
    """
    x = _as_array(x)
    probe = Parameter("_fd_probe", x.copy())
    out = f(probe.leaf())
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function under test returned a non-finite value")
    analytic = backward(out).get("_fd_probe")
    if analytic is None:
        raise GraphError("function under test does not depend on its input")

    flat = x.ravel()
    central = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        hi = float(f(constant(bumped.reshape(x.shape))).value)
        bumped[i] -= 2.0 * h
        lo = float(f(constant(bumped.reshape(x.shape))).value)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError("function under test returned a non-finite value at a probe point")
        central[i] = (hi - lo) / (2.0 * h)
    err = np.abs(analytic.ravel() - central) / (np.abs(central) + 1e-8)
    return float(err.max())
