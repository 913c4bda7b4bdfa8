"""Eager reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is a tape. Every op evaluates immediately and appends a
record; :func:`backward` walks the tape in reverse insertion order. Tensors
are plain ``np.ndarray`` values of dtype float64; scalars have shape ``(1,)``.

Broadcasting is deliberately narrow: the only implicit broadcast is adding a
bias row (shape ``(m,)`` or ``(1, m)``) to an ``(n, m)`` matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np

LOG_FLOOR = 1e-7
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """An op received inputs whose shapes it does not accept."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


@dataclass(frozen=True, eq=False)
class Node:
    """Handle to one tape entry. Arithmetic operators record new ops."""

    graph: "Graph"
    id: int

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar node of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return self.graph.add(self, self.graph.lift(other))

    def __radd__(self, other):
        return self.graph.add(self.graph.lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self.graph.lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self.graph.lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scalar_mul(self, float(other))
        return self.graph.mul(self, self.graph.lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.graph.scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, self.graph.lift(other))

    def __repr__(self) -> str:
        op = self.graph.ops[self.id]
        return f"Node(id={self.id}, op={op!r}, shape={self.shape})"


# A vjp maps (output gradient, input values, output value, attrs) to one
# gradient per input.
Vjp = Callable[[np.ndarray, list, np.ndarray, dict], list]


def _bias_like(a: np.ndarray, b: np.ndarray) -> bool:
    return (
        a.ndim == 2
        and b.shape[-1] == a.shape[1]
        and (b.ndim == 1 or (b.ndim == 2 and b.shape[0] == 1))
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0).reshape(shape)


def _check_binary(op: str, a: np.ndarray, b: np.ndarray, allow_bias: bool) -> None:
    if a.shape == b.shape:
        return
    if allow_bias and _bias_like(a, b):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _vjp_matmul(g, vals, out, attrs):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fwd_add(vals, attrs):
    a, b = vals
    _check_binary("add", a, b, allow_bias=True)
    return a + b


def _vjp_add(g, vals, out, attrs):
    return [_reduce_to(g, vals[0].shape), _reduce_to(g, vals[1].shape)]


def _fwd_sub(vals, attrs):
    a, b = vals
    _check_binary("sub", a, b, allow_bias=True)
    return a - b


def _vjp_sub(g, vals, out, attrs):
    return [_reduce_to(g, vals[0].shape), -_reduce_to(g, vals[1].shape)]


def _fwd_mul(vals, attrs):
    a, b = vals
    _check_binary("mul", a, b, allow_bias=False)
    return a * b


def _vjp_mul(g, vals, out, attrs):
    a, b = vals
    return [g * b, g * a]


def _fwd_scalar_mul(vals, attrs):
    return vals[0] * attrs["c"]


def _vjp_scalar_mul(g, vals, out, attrs):
    return [g * attrs["c"]]


def _fwd_scalar_add(vals, attrs):
    return vals[0] + attrs["c"]


def _vjp_identity(g, vals, out, attrs):
    return [g]


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _vjp_relu(g, vals, out, attrs):
    return [g * (vals[0] > 0.0)]


def _fwd_exp(vals, attrs):
    return np.exp(vals[0])


def _vjp_exp(g, vals, out, attrs):
    return [g * out]


def _fwd_log(vals, attrs):
    return np.log(np.maximum(vals[0], LOG_FLOOR))


def _vjp_log(g, vals, out, attrs):
    x = vals[0]
    return [np.where(x > LOG_FLOOR, g / np.maximum(x, LOG_FLOOR), 0.0)]


def _fwd_sigmoid(vals, attrs):
    x = vals[0]
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _vjp_sigmoid(g, vals, out, attrs):
    return [g * out * (1.0 - out)]


def _reduced_shape(x: np.ndarray, axis) -> tuple[int, ...]:
    if axis is None:
        return (1,)
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"reduction over axis={axis} needs a 2-D input, got {x.shape}")
    return (1, x.shape[1]) if axis == 0 else (x.shape[0], 1)


def _fwd_sum(vals, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    shape = _reduced_shape(x, axis)
    if axis is None:
        return np.array([x.sum()])
    return x.sum(axis=axis).reshape(shape)


def _vjp_sum(g, vals, out, attrs):
    x = vals[0]
    if attrs.get("axis") is None:
        return [np.full(x.shape, g.reshape(-1)[0])]
    return [np.broadcast_to(g, x.shape).copy()]


def _fwd_mean(vals, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    shape = _reduced_shape(x, axis)
    if axis is None:
        return np.array([x.mean()])
    return x.mean(axis=axis).reshape(shape)


def _vjp_mean(g, vals, out, attrs):
    x = vals[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else x.shape[axis]
    if axis is None:
        return [np.full(x.shape, g.reshape(-1)[0] / count)]
    return [np.broadcast_to(g / count, x.shape).copy()]


def _fwd_log_softmax(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-D input, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _vjp_log_softmax(g, vals, out, attrs):
    return [g - np.exp(out) * g.sum(axis=1, keepdims=True)]


def _fwd_l2_normalize(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize: expected 2-D input, got {x.shape}")
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norm, NORM_EPS)


def _vjp_l2_normalize(g, vals, out, attrs):
    x = vals[0]
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = np.maximum(norm, NORM_EPS)
    proj = (g * out).sum(axis=1, keepdims=True)
    # rows below the floor are scaled by a constant, so only g / eps survives
    return [np.where(norm > NORM_EPS, (g - out * proj) / safe, g / safe)]


def _fwd_concat_rows(vals, attrs):
    widths = {v.shape[1:] for v in vals}
    if len(widths) != 1 or any(v.ndim != 2 for v in vals):
        raise ShapeError(f"concat_rows: incompatible shapes {[v.shape for v in vals]}")
    return np.concatenate(vals, axis=0)


def _vjp_concat_rows(g, vals, out, attrs):
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])
    return [g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def _fwd_clamp(vals, attrs):
    return np.clip(vals[0], attrs["lo"], attrs["hi"])


def _vjp_clamp(g, vals, out, attrs):
    x = vals[0]
    return [g * ((x > attrs["lo"]) & (x < attrs["hi"]))]


def _fwd_grad_reverse(vals, attrs):
    return vals[0].copy()


def _vjp_grad_reverse(g, vals, out, attrs):
    return [-attrs["scale"] * g]


def _fwd_transpose(vals, attrs):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {x.shape}")
    return x.T.copy()


def _vjp_transpose(g, vals, out, attrs):
    return [g.T]


OPS: dict[str, tuple[Callable, Vjp, int | None]] = {
    # name: (forward, vjp, arity or None for variadic)
    "matmul": (_fwd_matmul, _vjp_matmul, 2),
    "add": (_fwd_add, _vjp_add, 2),
    "sub": (_fwd_sub, _vjp_sub, 2),
    "mul": (_fwd_mul, _vjp_mul, 2),
    "scalar_mul": (_fwd_scalar_mul, _vjp_scalar_mul, 1),
    "scalar_add": (_fwd_scalar_add, _vjp_identity, 1),
    "relu": (_fwd_relu, _vjp_relu, 1),
    "exp": (_fwd_exp, _vjp_exp, 1),
    "log": (_fwd_log, _vjp_log, 1),
    "sigmoid": (_fwd_sigmoid, _vjp_sigmoid, 1),
    "mean": (_fwd_mean, _vjp_mean, 1),
    "sum": (_fwd_sum, _vjp_sum, 1),
    "log_softmax": (_fwd_log_softmax, _vjp_log_softmax, 1),
    "l2_normalize": (_fwd_l2_normalize, _vjp_l2_normalize, 1),
    "concat_rows": (_fwd_concat_rows, _vjp_concat_rows, None),
    "clamp": (_fwd_clamp, _vjp_clamp, 1),
    "grad_reverse": (_fwd_grad_reverse, _vjp_grad_reverse, 1),
    "transpose": (_fwd_transpose, _vjp_transpose, 1),
}


class Graph:
    """Append-only tape. Single-use, single-thread."""

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.attrs: list[dict] = []
        self.values: list[np.ndarray] = []
        self.trainable: list[bool] = []
        self.names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.ops)

    def _append(self, op, inputs, attrs, value, trainable) -> Node:
        self.ops.append(op)
        self.inputs.append(tuple(inputs))
        self.attrs.append(attrs)
        self.values.append(value)
        self.trainable.append(trainable)
        return Node(self, len(self.ops) - 1)

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input (parameter or probe)."""
        node = self._append("leaf", (), {}, as_tensor(value), True)
        if name is not None:
            self.names[name] = node.id
        return node

    def constant(self, value) -> Node:
        """A non-differentiable input; backward never assigns it a gradient."""
        return self._append("const", (), {}, as_tensor(value), False)

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.constant(x)

    def bind(self, params: Mapping[str, np.ndarray], prefix: str = "") -> dict[str, Node]:
        return {k: self.leaf(v, name=prefix + k) for k, v in params.items()}

    def forward(self, op: str, *inputs: Node, **attrs) -> Node:
        try:
            fwd, _, arity = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if arity is not None and len(inputs) != arity:
            raise ValueError(f"{op} takes {arity} inputs, got {len(inputs)}")
        nodes = [self.lift(x) for x in inputs]
        vals = [self.values[n.id] for n in nodes]
        with np.errstate(over="ignore", invalid="ignore"):
            out = fwd(vals, attrs)
        if not np.all(np.isfinite(out)) and all(np.all(np.isfinite(v)) for v in vals):
            raise NumericError(f"{op} produced non-finite output")
        trainable = any(self.trainable[n.id] for n in nodes)
        return self._append(op, [n.id for n in nodes], attrs, out, trainable)

    # Named wrappers, one per op kind.
    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def add(self, a, b):
        return self.forward("add", a, b)

    def sub(self, a, b):
        return self.forward("sub", a, b)

    def mul(self, a, b):
        return self.forward("mul", a, b)

    def scalar_mul(self, a, c: float):
        return self.forward("scalar_mul", a, c=float(c))

    def scalar_add(self, a, c: float):
        return self.forward("scalar_add", a, c=float(c))

    def relu(self, a):
        return self.forward("relu", a)

    def exp(self, a):
        return self.forward("exp", a)

    def log(self, a):
        return self.forward("log", a)

    def sigmoid(self, a):
        return self.forward("sigmoid", a)

    def mean(self, a, axis: int | None = None):
        return self.forward("mean", a, axis=axis)

    def sum(self, a, axis: int | None = None):
        return self.forward("sum", a, axis=axis)

    def log_softmax(self, a):
        return self.forward("log_softmax", a)

    def l2_normalize(self, a):
        return self.forward("l2_normalize", a)

    def concat_rows(self, *parts):
        return self.forward("concat_rows", *parts)

    def clamp(self, a, lo: float, hi: float):
        return self.forward("clamp", a, lo=float(lo), hi=float(hi))

    def grad_reverse(self, a, scale: float = 1.0):
        return self.forward("grad_reverse", a, scale=float(scale))

    def transpose(self, a):
        return self.forward("transpose", a)

    def broadcast_cols(self, col, width: int):
        """Repeat an ``(n, 1)`` column across ``width`` columns via matmul."""
        return self.matmul(col, self.constant(np.ones((1, width))))


GradientMap = dict[int, np.ndarray]


def backward(graph: Graph, loss: Node) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to every trainable node it reaches."""
    if loss.graph is not graph:
        raise ValueError("loss node belongs to a different graph")
    if loss.value.shape != (1,):
        raise ShapeError(f"backward needs a scalar loss of shape (1,), got {loss.value.shape}")
    grads: GradientMap = {loss.id: np.ones(1)}
    for i in range(loss.id, -1, -1):
        g = grads.get(i)
        if g is None:
            continue
        op = graph.ops[i]
        if op in ("leaf", "const"):
            continue
        input_ids = graph.inputs[i]
        _, vjp, _ = OPS[op]
        vals = [graph.values[j] for j in input_ids]
        for j, gj in zip(input_ids, vjp(g, vals, graph.values[i], graph.attrs[i])):
            if not graph.trainable[j]:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = np.array(gj, dtype=np.float64)
    return {k: v for k, v in grads.items() if graph.trainable[k]}


def grads_by_name(graph: Graph, grads: GradientMap, nodes: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Gradient per named leaf; leaves the loss does not reach get zeros."""
    return {
        name: grads.get(node.id, np.zeros_like(node.value)) for name, node in nodes.items()
    }


class FDResult(NamedTuple):
    max_rel_error: float
    worst_param: str | None
    failure: str | None

    @property
    def ok(self) -> bool:
        return self.failure is None


def fd_check(
    closure: Callable[[Graph, dict[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> FDResult:
    """Compare analytic gradients against central differences.

    ``closure(graph, nodes)`` must build the loss from the bound parameter
    nodes. The returned error is ``max |analytic - fd| / (|fd| + 1e-8)``
    over every entry of every parameter; an empty parameter set yields 0.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: as_tensor(v).copy() for k, v in params.items()}
    g = Graph()
    nodes = g.bind(base)
    loss = closure(g, nodes)
    analytic = grads_by_name(g, backward(g, loss), nodes)

    def evaluate(trial: dict[str, np.ndarray]) -> float:
        gg = Graph()
        return closure(gg, gg.bind(trial)).item()

    worst, worst_name = 0.0, None
    for name, value in base.items():
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            try:
                plus = evaluate(base)
                flat[idx] = orig - step
                minus = evaluate(base)
            except NumericError as exc:
                return FDResult(float("inf"), name, f"{name}[{idx}]: {exc}")
            finally:
                flat[idx] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                return FDResult(float("inf"), name, f"{name}[{idx}]: non-finite loss")
            fd = (plus - minus) / (2 * step)
            err = abs(analytic[name].reshape(-1)[idx] - fd) / (abs(fd) + 1e-8)
            if err > worst:
                worst, worst_name = err, name
    return FDResult(float(worst), worst_name, None)
