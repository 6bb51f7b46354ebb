"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every backward rule is written in terms of ``Tensor`` operations, so with
``create_graph=True`` the returned gradients are themselves recorded and can
be differentiated again (double backward).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "GradientError",
    "tensor",
    "as_tensor",
    "grad",
    "no_grad",
    "tape_scope",
    "active_tape",
    "finite_diff_check",
    "FiniteDiffReport",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


_order = itertools.count()
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _local.grad_enabled = enabled
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    """Context manager that suspends tape recording."""
    return _grad_mode(False)


class Node:
    __slots__ = ("op", "inputs", "ctx", "order", "freed")

    def __init__(self, op, inputs, ctx):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.order = next(_order)
        self.freed = False


class Tape:
    """Scope that owns the nodes recorded while it is active.

    Leaving the scope frees every node (saved inputs included), so tensors that
    must outlive an iteration have to be ``detach()``-ed first.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def free(self) -> None:
        for node in self.nodes:
            node.inputs = ()
            node.ctx = None
            node.freed = True
        self.nodes = []
        self.generation += 1


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextmanager
def tape_scope(tape: Tape | None = None):
    tape = tape if tape is not None else Tape()
    prev = active_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev
        tape.free()


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _readonly(np.array(data, dtype=np.float64, copy=True))
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False, node: Node | None = None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t.data = _readonly(arr)
        t.requires_grad = requires_grad
        t.node = node
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def requires_grad_(self) -> "Tensor":
        if self.node is not None:
            raise GradientError("only leaf tensors can be marked as differentiation targets")
        self.requires_grad = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive machinery

_BACKWARD: dict[str, Callable] = {}


def _backward_rule(op_id: str):
    def deco(fn):
        _BACKWARD[op_id] = fn
        return fn

    return deco


def _emit(op_id: str, out: np.ndarray, inputs: tuple[Tensor, ...], ctx=None) -> Tensor:
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(op_id, inputs, ctx)
        tape = active_tape()
        if tape is not None:
            tape.record(node)
        return Tensor._wrap(out, requires_grad=True, node=node)
    return Tensor._wrap(out)


def _broadcast_shape(op_id: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op_id}: incompatible shapes {a.shape} and {b.shape}") from None


def _check_finite_domain(op_id: str, a: Tensor) -> None:
    if np.any(a.data < 0):
        bad = float(a.data[a.data < 0].reshape(-1)[0])
        raise DomainError(f"{op_id}: negative input {bad!r}")


# -- elementwise binary --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@_backward_rule("add")
def _add_bw(g, inputs, ctx):
    a, b = inputs
    return sum_to(g, a.shape), sum_to(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@_backward_rule("sub")
def _sub_bw(g, inputs, ctx):
    a, b = inputs
    return sum_to(g, a.shape), sum_to(neg(g), b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


@_backward_rule("mul")
def _mul_bw(g, inputs, ctx):
    a, b = inputs
    ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    return _emit("div", a.data / b.data, (a, b))


@_backward_rule("div")
def _div_bw(g, inputs, ctx):
    a, b = inputs
    ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
    return ga, gb


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,))


@_backward_rule("neg")
def _neg_bw(g, inputs, ctx):
    return (neg(g),)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@_backward_rule("matmul")
def _matmul_bw(g, inputs, ctx):
    a, b = inputs
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


# -- elementwise unary ---------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    return _emit("exp", np.exp(a.data), (a,))


@_backward_rule("exp")
def _exp_bw(g, inputs, ctx):
    (a,) = inputs
    return (mul(g, exp(a)),)


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite_domain("log", a)
    with np.errstate(divide="ignore"):
        return _emit("log", np.log(a.data), (a,))


@_backward_rule("log")
def _log_bw(g, inputs, ctx):
    (a,) = inputs
    return (div(g, a),)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _check_finite_domain("sqrt", a)
    return _emit("sqrt", np.sqrt(a.data), (a,))


@_backward_rule("sqrt")
def _sqrt_bw(g, inputs, ctx):
    (a,) = inputs
    return (div(g, mul(sqrt(a), 2.0)),)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.data * a.data, (a,))


@_backward_rule("square")
def _square_bw(g, inputs, ctx):
    (a,) = inputs
    return (mul(g, mul(a, 2.0)),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


@_backward_rule("relu")
def _relu_bw(g, inputs, ctx):
    (a,) = inputs
    return (mul(g, Tensor._wrap((a.data > 0).astype(np.float64))),)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sigmoid", _sigmoid_np(a.data), (a,))


@_backward_rule("sigmoid")
def _sigmoid_bw(g, inputs, ctx):
    (a,) = inputs
    s = sigmoid(a)
    return (mul(g, mul(s, sub(1.0, s))),)


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow."""
    a = as_tensor(a)
    x = a.data
    return _emit("softplus", np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), (a,))


@_backward_rule("softplus")
def _softplus_bw(g, inputs, ctx):
    (a,) = inputs
    return (mul(g, sigmoid(a)),)


def clamp01(a) -> Tensor:
    a = as_tensor(a)
    return _emit("clamp01", np.clip(a.data, 0.0, 1.0), (a,))


@_backward_rule("clamp01")
def _clamp01_bw(g, inputs, ctx):
    (a,) = inputs
    inside = (a.data > 0.0) & (a.data < 1.0)
    return (mul(g, Tensor._wrap(inside.astype(np.float64))),)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", np.sin(a.data), (a,))


@_backward_rule("sin")
def _sin_bw(g, inputs, ctx):
    (a,) = inputs
    return (mul(g, cos(a)),)


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _emit("cos", np.cos(a.data), (a,))


@_backward_rule("cos")
def _cos_bw(g, inputs, ctx):
    (a,) = inputs
    return (neg(mul(g, sin(a))),)


# -- reductions and shape ops -------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    return _emit("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), (axes, keepdims))


@_backward_rule("sum")
def _sum_bw(g, inputs, ctx):
    (a,) = inputs
    axes, keepdims = ctx
    if not keepdims:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kept)
    return (broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return _emit("mean", np.mean(a.data, axis=axes, keepdims=keepdims), (a,), (axes, keepdims, count))


@_backward_rule("mean")
def _mean_bw(g, inputs, ctx):
    (a,) = inputs
    axes, keepdims, count = ctx
    if not keepdims:
        kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
        g = reshape(g, kept)
    return (broadcast_to(div(g, float(count)), a.shape),)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _emit("broadcast", out, (a,))


@_backward_rule("broadcast")
def _broadcast_bw(g, inputs, ctx):
    (a,) = inputs
    return (sum_to(g, a.shape),)


def sum_to(a, shape) -> Tensor:
    """Reduce ``a`` by summation to ``shape`` (the adjoint of broadcasting)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    out = np.sum(a.data, axis=axes, keepdims=True)
    if lead:
        out = out.reshape(shape)
    return _emit("sum_to", out.reshape(shape), (a,))


@_backward_rule("sum_to")
def _sum_to_bw(g, inputs, ctx):
    (a,) = inputs
    return (broadcast_to(g, a.shape),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,))


@_backward_rule("reshape")
def _reshape_bw(g, inputs, ctx):
    (a,) = inputs
    return (reshape(g, a.shape),)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,))


@_backward_rule("transpose")
def _transpose_bw(g, inputs, ctx):
    return (transpose(g),)


def concat_rows(tensors: Sequence) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat_rows: no inputs")
    tails = {t.shape[1:] for t in tensors}
    if len(tails) != 1 or any(t.ndim == 0 for t in tensors):
        raise ShapeError(f"concat_rows: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _emit("concat_rows", out, tensors, tuple(t.shape[0] for t in tensors))


@_backward_rule("concat_rows")
def _concat_rows_bw(g, inputs, ctx):
    grads, start = [], 0
    for t, n in zip(inputs, ctx):
        grads.append(slice_rows(g, start, start + n) if t.requires_grad else None)
        start += n
    return tuple(grads)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: rows [{start}, {stop}) out of range for shape {a.shape}")
    return _emit("slice_rows", a.data[start:stop].copy(), (a,), (start, stop))


@_backward_rule("slice_rows")
def _slice_rows_bw(g, inputs, ctx):
    (a,) = inputs
    start, stop = ctx
    parts = []
    if start > 0:
        parts.append(Tensor._wrap(np.zeros((start,) + a.shape[1:])))
    parts.append(g)
    if stop < a.shape[0]:
        parts.append(Tensor._wrap(np.zeros((a.shape[0] - stop,) + a.shape[1:])))
    return (concat_rows(parts) if len(parts) > 1 else g,)


def l2norm_rows(a, eps: float = 0.0) -> Tensor:
    """Euclidean norm of each row, ``sqrt(sum_j a_ij**2 + eps)``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2norm_rows: expected a matrix, got shape {a.shape}")
    return _emit("l2norm_rows", np.sqrt(np.sum(a.data * a.data, axis=1) + eps), (a,), eps)


@_backward_rule("l2norm_rows")
def _l2norm_rows_bw(g, inputs, ctx):
    (a,) = inputs
    n = l2norm_rows(a, ctx)
    if np.any(n.data == 0):
        raise GradientError("l2norm_rows: gradient undefined at a zero row (use eps > 0)")
    return (mul(reshape(div(g, n), (a.shape[0], 1)), a),)


def gather(a, index: np.ndarray) -> Tensor:
    """Pick entries of the flattened ``a`` at integer positions ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    return _emit("gather", a.data.reshape(-1)[index], (a,), index)


@_backward_rule("gather")
def _gather_bw(g, inputs, ctx):
    (a,) = inputs
    return (scatter_add(g, ctx, a.shape),)


def scatter_add(a, index: np.ndarray, shape) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``a`` into a zero tensor of ``shape``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    size = int(np.prod(shape))
    out = np.bincount(index.reshape(-1), weights=a.data.reshape(-1), minlength=size)
    return _emit("scatter_add", out.reshape(shape), (a,), index)


@_backward_rule("scatter_add")
def _scatter_add_bw(g, inputs, ctx):
    return (gather(g, ctx),)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "clamp01": clamp01,
    "sin": sin,
    "cos": cos,
    "l2norm_rows": l2norm_rows,
    "broadcast": broadcast_to,
    "sum_to": sum_to,
    "reshape": reshape,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "slice_rows": slice_rows,
    "gather": gather,
    "scatter_add": scatter_add,
}


def primitive(op_id: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name."""
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# differentiation

def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Entries of ``wrt`` that ``output`` does not depend on get a zero tensor.
    With ``create_graph`` the results are recorded and differentiable.
    """
    if output.size != 1:
        raise GradientError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise GradientError("grad: every wrt entry must have requires_grad=True")

    # accumulated cotangents, keyed by node for op outputs and id() for leaves
    cot: dict = {}
    seed = Tensor._wrap(np.ones(output.shape))
    if output.node is None:
        cot[id(output)] = seed
    else:
        cot[output.node] = seed

    nodes = _reachable(output)
    with _grad_mode(create_graph):
        for node in nodes:
            g = cot.get(node)
            if g is None:
                continue
            if node.freed:
                raise GradientError(f"grad: node {node.op!r} belongs to a freed tape")
            in_grads = _BACKWARD[node.op](g, node.inputs, node.ctx)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = inp.node if inp.node is not None else id(inp)
                prev = cot.get(key)
                cot[key] = ig if prev is None else add(prev, ig)

    out = []
    for w in wrt:
        key = w.node if w.node is not None else id(w)
        g = cot.get(key)
        if g is None:
            g = Tensor._wrap(np.zeros(w.shape))
        elif not create_graph:
            g = Tensor._wrap(g.data)
        out.append(g)
    return out


def _reachable(output: Tensor) -> list[Node]:
    if output.node is None:
        return []
    seen = {id(output.node): output.node}
    stack = [output.node]
    while stack:
        node = stack.pop()
        for inp in node.inputs:
            n = inp.node
            if n is not None and id(n) not in seen:
                seen[id(n)] = n
                stack.append(n)
    # creation order is a topological order
    return sorted(seen.values(), key=lambda n: n.order, reverse=True)


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_err)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> FiniteDiffReport:
    """Compare ``grad(f(x), x)`` with central differences, componentwise.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    analytic = analytic.data.copy()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[i] += sign * step
                v = f(Tensor(pert.reshape(base.shape))).item()
                if not np.isfinite(v):
                    idx = np.unravel_index(i, base.shape)
                    raise GradientError(f"finite_diff_check: non-finite value when perturbing component {idx}")
                vals.append(v)
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    if rel.size == 0:
        return FiniteDiffReport(0.0, None, analytic, numeric)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return FiniteDiffReport(float(rel[worst]), tuple(int(i) for i in worst), analytic, numeric)


def parameters_like(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Fresh differentiable leaves holding copies of ``tensors``."""
    return [Tensor._wrap(t.data, requires_grad=True) for t in tensors]
