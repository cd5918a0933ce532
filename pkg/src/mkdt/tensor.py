"""Dense float64 tensors with tape-based reverse-mode autodiff.

A :class:`Graph` is an append-only tape. Operations on tensors that belong to
a graph are recorded on it; operations on untracked tensors are evaluated
eagerly and produce untracked results. :func:`backward` walks the tape once in
reverse order and then frees it.

Only first-order gradients are supported. Code that needs a gradient inside a
differentiable computation (the distillation unroll) writes that gradient out
as ordinary tensor expressions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import TruncatedError

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "relu",
    "sqrt",
    "power",
    "exp",
    "log",
    "tsum",
    "mean",
    "sq_frobenius",
    "trace",
    "reshape",
    "take_rows",
    "getitem",
    "concat",
    "write_tensor_record",
    "read_tensor_record",
    "TruncatedError",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class GraphError(RuntimeError):
    """Misuse of a computation graph (wrong graph, freed tape, non-scalar output)."""


class Tensor:
    """A float64 array plus an optional handle into a :class:`Graph`."""

    __slots__ = ("data", "graph", "node")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, graph: Graph | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)


class Graph:
    """Append-only tape of recorded operations.

    Each node is ``(op, parent_ids, vjp)`` where ``vjp`` maps the output
    cotangent to one cotangent per parent. Parents always precede children, so
    tape order is a topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int | None, ...], Callable | None]] = []
        self.freed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        """Register ``value`` as a differentiable input and return its tensor."""
        self._check_live()
        data = value.data if isinstance(value, Tensor) else value
        data = np.array(data, dtype=np.float64, copy=True)
        self.nodes.append(("leaf", (), None))
        return Tensor(data, self, len(self.nodes) - 1)

    def record(self, op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        self._check_live()
        ids = tuple(p.node if p.graph is self else None for p in parents)
        self.nodes.append((op, ids, vjp))
        return Tensor(data, self, len(self.nodes) - 1)

    def free(self) -> None:
        self.nodes = []
        self.freed = True

    def _check_live(self) -> None:
        if self.freed:
            raise GraphError("graph has been freed by a previous backward pass")


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(*ts: Tensor) -> Graph | None:
    g = None
    for t in ts:
        if t.graph is not None and t.node is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise GraphError("operands belong to different graphs")
    return g


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    g = _graph_of(*parents)
    if g is None:
        return Tensor(data)
    return g.record(op, data, parents, vjp)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    """``a ** p`` for a constant real exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return _emit("power", ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum over all entries (``axis=None``) or one axis, keeping dims."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")
    out = a.data.sum(axis=axis, keepdims=True)
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / count)


def sq_frobenius(a) -> Tensor:
    """Sum of squared entries, correctly rounded so the value ignores entry order."""
    a = as_tensor(a)
    ad = a.data
    sq = (ad * ad).ravel()
    try:
        value = math.fsum(sq)
    except (OverflowError, ValueError):
        value = float(np.sum(sq))  # inf or nan, propagated like plain summation
    return _emit("sq_frobenius", np.asarray(value), (a,), lambda g: (2.0 * float(g) * ad,))


def trace(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace: expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    return _emit("trace", np.asarray(np.trace(a.data)), (a,), lambda g: (float(g) * np.eye(n),))


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _emit("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]`` of a matrix; duplicate indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim < 1:
        raise ShapeError(f"take_rows: cannot index shape {a.shape}")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", a.data[idx], (a,), vjp)


def getitem(a, index) -> Tensor:
    """Basic slicing (slices and integers); integer arrays route to :func:`take_rows`."""
    a = as_tensor(a)
    if isinstance(index, (list, np.ndarray)):
        return take_rows(a, index)
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None
    out = np.array(out, dtype=np.float64)

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", out, (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no operands")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {p.shape} along axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _emit("concat", out, parts, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(output: Tensor, leaves: Sequence[Tensor]) -> list[Tensor]:
    """Return ``d output / d leaf`` for each leaf, in order, then free the graph.

    Leaves that the output does not depend on get a zero gradient.
    """
    if output.data.size != 1:
        raise GraphError(f"backward: output must be scalar, got shape {output.shape}")
    graph = output.graph
    if graph is None or output.node is None:
        raise GraphError("backward: output is not part of a graph")
    graph._check_live()
    wanted: dict[int, int] = {}
    for k, leaf in enumerate(leaves):
        if leaf.graph is not graph or leaf.node is None or graph.nodes[leaf.node][0] != "leaf":
            raise GraphError(f"backward: leaf #{k} {leaf!r} is not a leaf of this graph")
        wanted[leaf.node] = k

    grads: dict[int, np.ndarray] = {output.node: np.ones(output.shape)}
    found: dict[int, np.ndarray] = {}
    nodes = graph.nodes
    for nid in range(output.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        op, parents, vjp = nodes[nid]
        if op == "leaf":
            found[nid] = g
            continue
        for pid, pg in zip(parents, vjp(g)):
            if pid is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    graph.free()
    out = []
    for leaf in leaves:
        g = found.get(leaf.node)
        out.append(Tensor(np.zeros(leaf.shape) if g is None else np.asarray(g).reshape(leaf.shape)))
    return out


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    max_abs_error: float
    autodiff: list[np.ndarray]
    numeric: list[np.ndarray]
    tolerance: float
    h: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_diff_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray] | np.ndarray,
    h: float = 1e-6,
    tolerance: float = 1e-5,
    entries: int | None = None,
    seed: int = 0,
) -> FiniteDiffReport:
    """Compare autodiff gradients of scalar ``fn`` with central differences.

    ``point`` is one array or a list of arrays (one per argument of ``fn``).
    The relative error is ``max|auto - numeric| / max(max|auto|, max|numeric|)``
    taken over all arguments together (0 when both gradients vanish). ``entries`` limits the number
    of coordinates probed per argument, chosen with ``seed``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    single = isinstance(point, np.ndarray)
    arrays = [np.array(point if single else p, dtype=np.float64) for p in ([point] if single else point)]

    g = Graph()
    leaves = [g.leaf(a) for a in arrays]
    out = fn(*leaves)
    if out.graph is None:
        auto = [np.zeros_like(a) for a in arrays]
    else:
        auto = [t.data for t in backward(out, leaves)]

    def evaluate(vals):
        return as_tensor(fn(*[Tensor(v) for v in vals])).item()

    rng = np.random.default_rng(seed)
    numeric = []
    diffs, scale = [], 0.0
    for k, a in enumerate(arrays):
        num = np.full(a.shape, np.nan)
        flat = np.arange(a.size)
        if entries is not None and entries < a.size:
            flat = np.sort(rng.choice(a.size, size=entries, replace=False))
        for j in flat:
            idx = np.unravel_index(j, a.shape)
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            num[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        numeric.append(num)
        mask = ~np.isnan(num)
        if mask.any():
            diffs.append(float(np.abs(auto[k][mask] - num[mask]).max()))
            scale = max(scale, float(np.abs(auto[k][mask]).max()), float(np.abs(num[mask]).max()))
    abs_err = max(diffs, default=0.0)
    rel = abs_err / scale if scale > 0 else 0.0
    return FiniteDiffReport(rel, abs_err, auto, numeric, tolerance, h)


# ---------------------------------------------------------------------------
# binary record: rank u32, extents u32 each, little-endian f64 payload


def write_tensor_record(fh, array) -> None:
    arr = np.array(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated: expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor_record(fh) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
