"""Reverse-mode automatic differentiation over dense float64 matrices.

Every differentiable value is a 2-D matrix (vectors are n x 1 or 1 x n,
scalars are 1 x 1). A :class:`Tape` records one node per operation in
execution order; :func:`backward` replays the nodes in reverse exactly
once. Tensors without a tape are constants and may be shared freely.

There is no implicit broadcasting: binary elementwise operations demand
exact shape equality, and any shape coercion (bias rows, column tiling)
is written out explicitly by callers. Tapes are single-use and rebuilt
per training step, so data-dependent graph structure is fine.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ParameterError, ShapeError, StateError, SolveError

Array = np.ndarray


def _as_matrix(x) -> Array:
    """Coerce input to a 2-D float64 array (1-D becomes a row vector)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A dense real matrix, optionally tracked on a tape.

    ``value`` is the forward result; ``tape``/``node_id`` are set only for
    tracked tensors. Use :meth:`Tape.parameter` for leaves that need
    gradients and :func:`constant` (or raw arrays, which most ops accept)
    for fixed data.
    """

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: "Tape | None" = None, node_id: int | None = None):
        self.value = _as_matrix(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> Array | None:
        """Gradient filled in by the owning tape's backward sweep."""
        if self.tape is None or self.tape.grads is None or self.node_id is None:
            return None
        return self.tape.grads[self.node_id]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return negate(self)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor({self.shape[0]}x{self.shape[1]}, {tag})"


def constant(x) -> Tensor:
    """An untracked tensor; participates in ops without receiving gradients."""
    return Tensor(x)


class _Node:
    __slots__ = ("op", "input_ids", "backward_fn")

    def __init__(self, op: str, input_ids: tuple, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Append-only operation record; topological order equals append order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[Array | None] | None = None
        self.consumed = False

    def parameter(self, value) -> Tensor:
        """Create a tracked leaf. Copies the input array."""
        val = _as_matrix(value).copy()
        return self._record("leaf", (), None, val)

    def _record(self, op: str, inputs: tuple[Tensor, ...], backward_fn, value: Array) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.nodes.append(_Node(op, ids, backward_fn))
        return Tensor(value, tape=self, node_id=len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[int, Array]:
        """Reverse sweep from a scalar loss; fills every reachable gradient.

        Returns the gradient map keyed by node id. A tape can be swept only
        once; rebuild the graph for the next step.
        """
        if self.consumed:
            raise StateError("tape already consumed by a previous backward()")
        if loss.tape is not self:
            raise StateError("loss does not belong to this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        self.grads = [None] * len(self.nodes)
        self.grads[loss.node_id] = np.ones((1, 1))
        for nid in range(loss.node_id, -1, -1):
            g = self.grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward_fn is None:
                continue
            input_grads = node.backward_fn(g)
            for in_id, in_grad in zip(node.input_ids, input_grads):
                if in_id is None or in_grad is None:
                    continue
                if self.grads[in_id] is None:
                    self.grads[in_id] = in_grad.copy()
                else:
                    self.grads[in_id] += in_grad
        return {i: g for i, g in enumerate(self.grads) if g is not None}


def backward(loss: Tensor) -> dict[int, Array]:
    if loss.tape is None:
        raise StateError("loss is a constant; nothing to differentiate")
    return loss.tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise StateError("operands belong to different tapes")
    return tape


# Backward rules live at module level so tests can fault-inject them.

def _matmul_grad_a(g: Array, b_val: Array) -> Array:
    return g @ b_val.T


def _matmul_grad_b(g: Array, a_val: Array) -> Array:
    return a_val.T @ g


def matmul(a, b) -> Tensor:
    """Matrix product; backward is dA = G B^T, dB = A^T G."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = a.value @ b.value
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.value, b.value
    return tape._record(
        "matmul", (a, b),
        lambda g: (_matmul_grad_a(g, bv), _matmul_grad_b(g, av)),
        out)


def _binary(op: str, a, b, fwd, bwd) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} vs {b.shape} (no implicit broadcasting)")
    out = fwd(a.value, b.value)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    av, bv = a.value, b.value
    return tape._record(op, (a, b), lambda g: bwd(g, av, bv), out)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: (g / y, -g * x / (y * y)))


def _unary(op: str, a, fwd, bwd) -> Tensor:
    a = _wrap(a)
    out = fwd(a.value)
    if a.tape is None:
        return Tensor(out)
    av = a.value
    return a.tape._record(op, (a,), lambda g: (bwd(g, av, out),), out)


def negate(a) -> Tensor:
    return _unary("negate", a, lambda x: -x, lambda g, x, y: -g)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def log(a) -> Tensor:
    a = _wrap(a)
    bad = a.value <= 0.0
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DomainError(f"log: non-positive input {a.value[i, j]!r} at index ({i}, {j})")
    return _unary("log", a, np.log, lambda g, x, y: g / x)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    bad = a.value < 0.0
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DomainError(f"sqrt: negative input at index ({i}, {j})")
    return _unary("sqrt", a, np.sqrt, lambda g, x, y: g * 0.5 / np.maximum(y, 1e-300))


def sin(a) -> Tensor:
    return _unary("sin", a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a) -> Tensor:
    return _unary("cos", a, np.cos, lambda g, x, y: -g * np.sin(x))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def sigmoid(a) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary("sigmoid", a, fwd, lambda g, x, y: g * y * (1.0 - y))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant (not a tape value)."""
    c = float(c)
    return _unary("scale", a, lambda x: x * c, lambda g, x, y: g * c)


def shift(a, c: float) -> Tensor:
    """Add a Python constant to every entry."""
    c = float(c)
    return _unary("shift", a, lambda x: x + c, lambda g, x, y: g)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp entries to [lo, hi]; gradient passes only strictly inside."""
    a = _wrap(a)
    av = a.value
    out = np.clip(av, lo, hi)
    if a.tape is None:
        return Tensor(out)
    inside = (av > lo) & (av < hi)
    return a.tape._record("clip", (a,), lambda g: (g * inside,), out)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with row-max subtraction for overflow safety."""
    a = _wrap(a)
    if a.shape[1] < 1:
        raise ShapeError("softmax_rows: need at least one column")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    if a.tape is None:
        return Tensor(out)

    def bwd(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return a.tape._record("softmax_rows", (a,), bwd, out)


def reduce(a, kind: str = "sum", axis: str = "all") -> Tensor:
    """Sum or mean over all entries, across rows, or across columns.

    axis="rows" collapses the row dimension (result 1 x n);
    axis="cols" collapses columns (result m x 1).
    """
    a = _wrap(a)
    if kind not in ("sum", "mean"):
        raise ParameterError(f"reduce: unknown kind {kind!r}")
    if axis not in ("all", "rows", "cols"):
        raise ParameterError(f"reduce: unknown axis {axis!r}")
    m, n = a.shape
    if m == 0 or n == 0:
        raise ShapeError("reduce: empty tensor")
    if axis == "all":
        out = a.value.sum().reshape(1, 1)
        count = m * n
    elif axis == "rows":
        out = a.value.sum(axis=0, keepdims=True)
        count = m
    else:
        out = a.value.sum(axis=1, keepdims=True)
        count = n
    if kind == "mean":
        out = out / count
    if a.tape is None:
        return Tensor(out)
    factor = 1.0 / count if kind == "mean" else 1.0

    def bwd(g):
        return (np.broadcast_to(g, (m, n)) * factor,)

    return a.tape._record(f"reduce_{kind}_{axis}", (a,), bwd, out)


def huber(a, delta: float) -> Tensor:
    """Sum of elementwise Huber penalties: 0.5 x^2 inside |x| <= delta,
    delta (|x| - 0.5 delta) outside. Gradient is x clamped to +-delta."""
    if delta <= 0:
        raise ParameterError(f"huber: delta must be positive, got {delta}")
    a = _wrap(a)
    av = a.value
    absa = np.abs(av)
    vals = np.where(absa <= delta, 0.5 * av * av, delta * (absa - 0.5 * delta))
    out = vals.sum().reshape(1, 1)
    if a.tape is None:
        return Tensor(out)

    def bwd(g):
        return (g * np.clip(av, -delta, delta),)

    return a.tape._record("huber", (a,), bwd, out)


def transpose(a) -> Tensor:
    a = _wrap(a)
    out = a.value.T.copy()
    if a.tape is None:
        return Tensor(out)
    return a.tape._record("transpose", (a,), lambda g: (g.T,), out)


def reshape(a, rows: int, cols: int) -> Tensor:
    a = _wrap(a)
    if rows * cols != a.shape[0] * a.shape[1]:
        raise ShapeError(f"reshape: {a.shape} -> ({rows}, {cols})")
    out = a.value.reshape(rows, cols).copy()
    if a.tape is None:
        return Tensor(out)
    m, n = a.shape
    return a.tape._record("reshape", (a,), lambda g: (g.reshape(m, n),), out)


def gather_rows(a, idx) -> Tensor:
    """Select rows by index; backward scatter-adds into the source."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ShapeError("gather_rows: empty index set")
    out = a.value[idx, :].copy()
    if a.tape is None:
        return Tensor(out)
    m, n = a.shape

    def bwd(g):
        acc = np.zeros((m, n))
        np.add.at(acc, idx, g)
        return (acc,)

    return a.tape._record("gather_rows", (a,), bwd, out)


def gather_cols(a, idx) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ShapeError("gather_cols: empty index set")
    out = a.value[:, idx].copy()
    if a.tape is None:
        return Tensor(out)
    m, n = a.shape

    def bwd(g):
        acc = np.zeros((m, n))
        np.add.at(acc.T, idx, g.T)
        return (acc,)

    return a.tape._record("gather_cols", (a,), bwd, out)


def gather_elements(a, rows, cols) -> Tensor:
    """Pick entries (rows[k], cols[k]) into a K x 1 column."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    cols = np.asarray(cols, dtype=np.intp).reshape(-1)
    if rows.shape != cols.shape or rows.size == 0:
        raise ShapeError("gather_elements: row/col index lists must match and be nonempty")
    out = a.value[rows, cols].reshape(-1, 1).copy()
    if a.tape is None:
        return Tensor(out)
    m, n = a.shape

    def bwd(g):
        acc = np.zeros((m, n))
        np.add.at(acc, (rows, cols), g[:, 0])
        return (acc,)

    return a.tape._record("gather_elements", (a,), bwd, out)


def hstack(tensors: Sequence) -> Tensor:
    """Concatenate columns; backward splits the gradient."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("hstack: nothing to concatenate")
    rows = ts[0].shape[0]
    for t in ts:
        if t.shape[0] != rows:
            raise ShapeError("hstack: row counts differ")
    out = np.hstack([t.value for t in ts])
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    widths = [t.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return tape._record("hstack", tuple(ts), bwd, out)


def scalar_mul(s, a) -> Tensor:
    """Multiply a matrix by a 1x1 tape scalar (both differentiable)."""
    s, a = _wrap(s), _wrap(a)
    if s.shape != (1, 1):
        raise ShapeError(f"scalar_mul: scalar must be 1x1, got {s.shape}")
    out = s.value[0, 0] * a.value
    tape = _tape_of(s, a)
    if tape is None:
        return Tensor(out)
    sv, av = s.value[0, 0], a.value

    def bwd(g):
        return (np.array([[float((g * av).sum())]]), g * sv)

    return tape._record("scalar_mul", (s, a), bwd, out)


def solve(a, b) -> Tensor:
    """X = A^-1 B for square A; gradients flow to both operands."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise ShapeError(f"solve: {a.shape} x {b.shape}")
    try:
        out = np.linalg.solve(a.value, b.value)
    except np.linalg.LinAlgError as err:
        raise SolveError(f"singular linear system: {err}") from err
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_t = a.value.T

    def bwd(g):
        gb = np.linalg.solve(a_t, g)
        return (-gb @ out.T, gb)

    return tape._record("solve", (a, b), bwd, out)


def finite_difference_check(
    build: Callable[[list[Tensor]], Tensor],
    values: Sequence[Array],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` receives freshly created tape parameters and returns the
    scalar loss; it is re-evaluated 2 x (number of scalar entries) times
    for the central differences, so keep probe problems small.
    """
    if h <= 0:
        raise ParameterError("finite_difference_check: h must be positive")
    values = [_as_matrix(v).copy() for v in values]

    tape = Tape()
    params = [tape.parameter(v) for v in values]
    loss = build(params)
    tape.backward(loss)
    analytic = [np.zeros_like(v) if p.grad is None else p.grad.copy()
                for p, v in zip(params, values)]

    def eval_at(vals: list[Array]) -> float:
        t = Tape()
        ps = [t.parameter(v) for v in vals]
        return build(ps).item()

    worst = 0.0
    for k, base in enumerate(values):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = eval_at(values)
            flat[j] = orig - h
            down = eval_at(values)
            flat[j] = orig
            central = (up - down) / (2.0 * h)
            ana = analytic[k].reshape(-1)[j]
            rel = abs(ana - central) / max(1e-12, abs(central))
            worst = max(worst, rel)
    return worst
