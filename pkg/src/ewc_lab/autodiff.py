"""Small reverse-mode differentiation engine over numpy-valued nodes.

Graphs are built lazily: constructing a node records the op and its inputs,
``forward`` evaluates the graph and caches every intermediate value, and
``backward`` propagates adjoints from a scalar root into a flat gradient laid
out like the :class:`ParamVector` the graph was built from.

Only the handful of ops an MLP classifier and a quadratic penalty need are
provided. Elementwise binary ops accept a second operand that is either the
same shape, a scalar, or a column ``(n, 1)`` against ``(n, C)``; nothing more
general.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GraphError(RuntimeError):
    pass


class NumericalOverflowError(GraphError):
    """A forward value became non-finite."""

    def __init__(self, op: "Op", node_id: int):
        super().__init__(f"non-finite value produced by op '{op.value}' (node {node_id})")
        self.op = op


class StaleGraphError(GraphError):
    pass


class ShapeError(ValueError):
    pass


class Op(enum.Enum):
    CONSTANT = "constant"
    PARAMETER = "parameter"
    SLICE = "slice"
    ADD = "add"
    MUL = "mul"
    MATMUL_ACC = "matmul-accumulate"
    RELU = "relu"
    LOG = "log"
    EXP = "exp"
    NEG = "neg"
    RECIPROCAL_SUM = "reciprocal-sum"
    MAX_SHIFT = "max-shift"
    SUM = "sum"


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the table mapping it onto layers."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("ParamVector values must be one-dimensional")
        self.layout = tuple(self.layout)
        total = sum(e.size for e in self.layout)
        if total != self.values.size:
            raise ShapeError(f"layout covers {total} values but vector has {self.values.size}")

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def view(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset:e.offset + e.size].reshape(e.shape)
        raise KeyError(name)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise ShapeError("parameter layouts differ")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)


def make_layout(shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[LayoutEntry, ...]:
    out, offset = [], 0
    for name, shape in shapes:
        entry = LayoutEntry(name, tuple(int(s) for s in shape), offset)
        out.append(entry)
        offset += entry.size
    return tuple(out)


_counter = 0


def _next_id() -> int:
    global _counter
    _counter += 1
    return _counter


@dataclass(eq=False)
class Node:
    op: Op
    preds: tuple["Node", ...] = ()
    value: np.ndarray | None = None
    adjoint: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)
    id: int = field(default_factory=_next_id)

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# -- constructors -----------------------------------------------------------

def constant(value) -> Node:
    return Node(Op.CONSTANT, value=np.asarray(value, dtype=np.float64))


def parameter(params: ParamVector) -> Node:
    """The whole flat vector as one leaf; layers are taken from it by ``take``."""
    return Node(Op.PARAMETER, value=params.values, attrs={"layout": params.layout})


def take(theta: Node, name: str) -> Node:
    for e in theta.attrs["layout"]:
        if e.name == name:
            return Node(Op.SLICE, (theta,), attrs={"entry": e})
    raise KeyError(name)


def add(a: Node, b: Node) -> Node:
    return Node(Op.ADD, (a, b))


def mul(a: Node, b: Node) -> Node:
    return Node(Op.MUL, (a, b))


def matmul_acc(x: Node, w: Node, b: Node | None = None) -> Node:
    """``x @ w + b`` with ``b`` added to every row."""
    return Node(Op.MATMUL_ACC, (x, w) if b is None else (x, w, b))


def relu(a: Node) -> Node:
    return Node(Op.RELU, (a,))


def log(a: Node) -> Node:
    return Node(Op.LOG, (a,))


def exp(a: Node) -> Node:
    return Node(Op.EXP, (a,))


def neg(a: Node) -> Node:
    return Node(Op.NEG, (a,))


def reciprocal_sum(a: Node) -> Node:
    """Row-wise ``1 / sum(a, axis=-1)`` kept as a column, the softmax normaliser."""
    return Node(Op.RECIPROCAL_SUM, (a,))


def max_shift(a: Node) -> Node:
    """Subtract each row's maximum (softmax stabilisation)."""
    return Node(Op.MAX_SHIFT, (a,))


def total(a: Node) -> Node:
    return Node(Op.SUM, (a,))


# -- evaluation --------------------------------------------------------------

def topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.preds:
            if p.id not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == grad.ndim and all(s in (1, g) for s, g in zip(shape, grad.shape)):
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
        return grad.sum(axis=axes, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _check_binary(a: np.ndarray, b: np.ndarray, op: Op) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim == 2 and b.ndim == 2 and a.shape[0] == b.shape[0] and 1 in (a.shape[1], b.shape[1]):
        return
    raise ShapeError(f"{op.value}: incompatible shapes {a.shape} and {b.shape}")


def _eval(node: Node) -> np.ndarray:
    op, p = node.op, node.preds
    if op is Op.SLICE:
        e = node.attrs["entry"]
        return p[0].value[e.offset:e.offset + e.size].reshape(e.shape)
    if op in (Op.ADD, Op.MUL):
        a, b = p[0].value, p[1].value
        _check_binary(a, b, op)
        return a + b if op is Op.ADD else a * b
    if op is Op.MATMUL_ACC:
        x, w = p[0].value, p[1].value
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul: {x.shape} @ {w.shape}")
        out = x @ w
        if len(p) == 3:
            out = out + p[2].value
        return out
    if op is Op.RELU:
        return np.maximum(p[0].value, 0.0)
    if op is Op.LOG:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(p[0].value)
    if op is Op.EXP:
        with np.errstate(over="ignore"):
            return np.exp(p[0].value)
    if op is Op.NEG:
        return -p[0].value
    if op is Op.RECIPROCAL_SUM:
        with np.errstate(divide="ignore"):
            return 1.0 / p[0].value.sum(axis=-1, keepdims=True)
    if op is Op.MAX_SHIFT:
        a = p[0].value
        return a - a.max(axis=-1, keepdims=True)
    if op is Op.SUM:
        return np.asarray(p[0].value.sum())
    raise GraphError(f"cannot evaluate op {op}")


def forward(root: Node) -> float | np.ndarray:
    """Evaluate every node under ``root``; returns the root value."""
    order = topo_order(root)
    for node in order:
        node.adjoint = None
        if node.op in (Op.CONSTANT, Op.PARAMETER):
            if node.value is None:
                raise GraphError(f"{node.op.value} node {node.id} has no value")
            continue
        node.value = _eval(node)
        if not np.all(np.isfinite(node.value)):
            raise NumericalOverflowError(node.op, node.id)
    root.attrs["_order"] = order
    out = root.value
    return float(out) if np.ndim(out) == 0 else out


def _backprop(node: Node) -> None:
    g = node.adjoint
    op, p = node.op, node.preds

    def send(target: Node, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad), np.shape(target.value))
        if target.adjoint is None:
            target.adjoint = np.array(grad, dtype=np.float64)
        else:
            target.adjoint = target.adjoint + grad

    if op is Op.SLICE:
        e = node.attrs["entry"]
        full = np.zeros_like(p[0].value)
        full[e.offset:e.offset + e.size] = g.reshape(-1)
        send(p[0], full)
    elif op is Op.ADD:
        send(p[0], g)
        send(p[1], g)
    elif op is Op.MUL:
        send(p[0], g * p[1].value)
        send(p[1], g * p[0].value)
    elif op is Op.MATMUL_ACC:
        x, w = p[0].value, p[1].value
        if x.ndim == 1:
            send(p[0], w @ g)
            send(p[1], np.outer(x, g))
        else:
            send(p[0], g @ w.T)
            send(p[1], x.T @ g)
        if len(p) == 3:
            send(p[2], g.sum(axis=0) if g.ndim == 2 else g)
    elif op is Op.RELU:
        # derivative at exactly 0 is taken as 0
        send(p[0], g * (p[0].value > 0.0))
    elif op is Op.LOG:
        send(p[0], g / p[0].value)
    elif op is Op.EXP:
        send(p[0], g * node.value)
    elif op is Op.NEG:
        send(p[0], -g)
    elif op is Op.RECIPROCAL_SUM:
        # d(1/s)/dx_j = -1/s^2 for every x_j in the row
        send(p[0], np.broadcast_to(-g * node.value ** 2, p[0].value.shape))
    elif op is Op.MAX_SHIFT:
        a = p[0].value
        hit = np.zeros_like(a)
        np.put_along_axis(hit, a.argmax(axis=-1)[..., None], 1.0, axis=-1)
        send(p[0], g - hit * g.sum(axis=-1, keepdims=True))
    elif op is Op.SUM:
        send(p[0], np.broadcast_to(g, p[0].value.shape))


def backward(root: Node) -> ParamVector:
    """Gradient of the scalar ``root`` w.r.t. the graph's parameter leaf.

    Raises :class:`StaleGraphError` if ``forward`` has not been run on this
    exact graph since it was built.
    """
    order = root.attrs.get("_order")
    if order is None or root.value is None:
        raise StaleGraphError("backward called before forward on this graph")
    if np.ndim(root.value) != 0:
        raise ShapeError("backward needs a scalar root")
    for node in order:
        node.adjoint = None
    root.adjoint = np.asarray(1.0)
    leaf = None
    for node in reversed(order):
        if node.op is Op.PARAMETER:
            if leaf is not None and leaf is not node:
                raise GraphError("graph has more than one parameter leaf")
            leaf = node
        if node.adjoint is None or not node.preds:
            continue
        _backprop(node)
    if leaf is None:
        raise GraphError("graph has no parameter leaf")
    grad = leaf.adjoint if leaf.adjoint is not None else np.zeros_like(leaf.value)
    return ParamVector(np.array(grad, dtype=np.float64), leaf.attrs["layout"])


def value_and_grad(build: Callable[[ParamVector], Node], params: ParamVector) -> tuple[float, ParamVector]:
    root = build(params)
    val = forward(root)
    return val, backward(root)


# -- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: np.ndarray
    excluded: list[int]
    passed: bool
    tolerance: float


def _kink_coords(build, params: ParamVector, step: float) -> list[int]:
    """Coordinates whose ±step perturbation moves some relu input across 0."""
    root = build(params)
    forward(root)
    relu_inputs = [n.preds[0] for n in root.attrs["_order"] if n.op is Op.RELU]
    if not relu_inputs:
        return []
    base = [n.value.copy() for n in relu_inputs]
    bad = []
    for i in range(len(params)):
        for sign in (1.0, -1.0):
            v = params.values.copy()
            v[i] += sign * step
            r = build(params.with_values(v))
            forward(r)
            pert = [n.preds[0] for n in r.attrs["_order"] if n.op is Op.RELU]
            # near-kink: pre-activation within 10*step of zero and actually moved
            if any(np.any((np.abs(b0) < 10 * step) & (p.value != b0)) for b0, p in zip(base, pert)):
                bad.append(i)
                break
    return bad


def grad_check(build: Callable[[ParamVector], Node], point: ParamVector,
               step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``backward`` with central differences coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. Coordinates sitting
    within ``10*step`` of a relu kink are excluded and listed, not failed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    root = build(point)
    forward(root)
    analytic = backward(root).values
    excluded = _kink_coords(build, point, step)
    rel = np.zeros(len(point))
    for i in range(len(point)):
        v = point.values.copy()
        v[i] += step
        fp = forward(build(point.with_values(v)))
        v[i] -= 2 * step
        fm = forward(build(point.with_values(v)))
        num = (fp - fm) / (2 * step)
        rel[i] = abs(analytic[i] - num) / max(abs(analytic[i]), abs(num), 1e-8)
    mask = np.ones(len(point), dtype=bool)
    mask[excluded] = False
    worst = float(rel[mask].max()) if mask.any() else 0.0
    return GradCheckReport(worst, rel, excluded, worst < tolerance, tolerance)
