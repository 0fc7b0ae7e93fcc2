"""Dense 2-D tensors with tape-style reverse-mode automatic differentiation.

Every value is a float64 matrix. Scalars are 1x1 matrices and row vectors are
1xC, so broadcasting only ever has to deal with those two cases. A graph is
rebuilt for every forward pass; nothing persists between training steps
except the leaf tensors and their accumulated gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, PreconditionError

LOG_FLOOR = 1e-12

_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix node in the computation graph."""

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "leaf",
    ) -> None:
        self.values = _as_matrix(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values.tolist()}{flag})"

    def __add__(self, other) -> "Tensor":
        return add(self, _lift(other))

    def __radd__(self, other) -> "Tensor":
        return add(_lift(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, _lift(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other), self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(values, _op=op)
    return Tensor(values, True, _parents=parents, _backward=fn, _op=op)


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")
    return out[0], out[1]


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.values, b.values
    return _node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(x.values * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.values
    return _node(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def log(x: Tensor) -> Tensor:
    """Natural log of ``max(x, 1e-12)``; the clamped region has zero slope."""
    guarded = np.maximum(x.values, LOG_FLOOR)
    live = x.values > LOG_FLOOR
    return _node(np.log(guarded), (x,), lambda g: (np.where(live, g / guarded, 0.0),), "log")


_ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(x: Tensor) -> Tensor:
    return _node(x.values.T.copy(), (x,), lambda g: (g.T,), "transpose")


def pick(x: Tensor, row: int, col: int) -> Tensor:
    """Single entry of ``x`` as a 1x1 tensor."""
    shape = x.shape

    def _back(g: np.ndarray):
        full = np.zeros(shape)
        full[row, col] = g[0, 0]
        return (full,)

    return _node(x.values[row : row + 1, col : col + 1].copy(), (x,), _back, "pick")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise PreconditionError("concat_rows needs at least one tensor")
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def _back(g: np.ndarray):
        return tuple(g[bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    return _node(np.vstack([p.values for p in parts]), tuple(parts), _back, "concat_rows")


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of ``x``."""
    if not 0 <= start < stop <= x.rows:
        raise PreconditionError(f"row_slice: rows {start}:{stop} outside 0..{x.rows}")
    shape = x.shape

    def _back(g: np.ndarray):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _node(x.values[start:stop].copy(), (x,), _back, "row_slice")


# -------------------------------------------------------------- reductions


def _require_nonempty(x: Tensor, op: str) -> None:
    if x.values.size == 0:
        raise PreconditionError(f"{op} of an empty tensor")


def tsum(x: Tensor) -> Tensor:
    _require_nonempty(x, "sum")
    shape = x.shape
    return _node(np.array([[x.values.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(x: Tensor) -> Tensor:
    _require_nonempty(x, "mean")
    shape, n = x.shape, x.values.size
    return _node(
        np.array([[x.values.sum() / n]]), (x,), lambda g: (np.full(shape, g[0, 0] / n),), "mean"
    )


def row_mean(x: Tensor) -> Tensor:
    """Average over rows, giving a 1 x cols tensor."""
    _require_nonempty(x, "row_mean")
    shape, n = x.shape, x.rows
    return _node(
        x.values.sum(axis=0, keepdims=True) / n,
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
        "row_mean",
    )


_REDUCE: dict[str, Callable[[Tensor], Tensor]] = {"sum": tsum, "mean": mean, "row_mean": row_mean}


def reduce(op: str, x: Tensor) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}; expected one of {sorted(_REDUCE)}") from None
    return fn(x)


def softmax_rows_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.cols < 1:
        raise DimensionError("softmax_rows needs at least one column")
    s = softmax_rows_array(x.values)

    def _back(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), _back, "softmax_rows")


# ---------------------------------------------------------------- backward


@dataclass
class Graph:
    """Nodes reachable from an output, parents before children."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.shape != (1, 1):
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    adjoints: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for node in reversed(graph.nodes):
        g = adjoints.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adjoints.get(parent.node_id)
            adjoints[parent.node_id] = pg if prev is None else prev + pg


# -------------------------------------------------------------- grad check


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` to central differences."""
    if eps <= 0:
        raise PreconditionError("eps must be positive")
    base = _as_matrix(x.values if isinstance(x, Tensor) else x)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.shape != (1, 1):
        raise PreconditionError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, bool(max_rel <= tol), analytic, numeric)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
