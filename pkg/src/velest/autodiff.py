"""Tape-based reverse-mode automatic differentiation on small dense tensors.

Everything downstream (vehicle dynamics, noise models, the filter itself)
is expressed in terms of the ops defined here, so estimation losses can be
backpropagated through whole filter rollouts.  Tensors wrap float64 numpy
arrays; a Tensor participates in differentiation only while a Tape is
active and the tensor (or one of its ancestors) has been watched on it.

Ops called with no active tape, or on untracked inputs, skip recording
entirely and run at plain numpy speed — that is the inference fast path.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "Tensor",
    "Tape",
    "ParameterSet",
    "as_tensor",
    "record_op",
    "add",
    "subtract",
    "hadamard",
    "divide",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "tanh",
    "sin",
    "cos",
    "atan",
    "atan2",
    "absolute",
    "clamp_min",
    "square",
    "sqrt_elementwise",
    "reduce_sum",
    "reduce_mean",
    "take",
    "concat",
    "stack",
    "reshape",
    "outer",
    "cholesky",
    "lower_triangular_solve",
    "fused_op",
    "unbroadcast",
    "grad_check",
]


class AutodiffError(RuntimeError):
    """Base class for everything this module raises on purpose."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    """An op produced NaN or Inf."""


class NotPositiveDefiniteError(AutodiffError):
    """Cholesky hit a non-positive pivot.

    Attributes
    ----------
    pivot : int
        Zero-based index of the first failing diagonal pivot.
    """

    def __init__(self, pivot: int, value: float):
        super().__init__(
            f"matrix is not positive definite: pivot {pivot} has value {value:.6e}"
        )
        self.pivot = pivot
        self.value = value


_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array plus an optional node id on the active tape."""

    __slots__ = ("values", "node")

    def __init__(self, values, node: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.node = node

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        """The raw values.  Callers must not write into the result."""
        return self.values

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor({self.values!r}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as untracked Tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Explicit, single-use recording of ops for one reverse pass.

    Use as a context manager; ops executed inside record nodes whenever at
    least one input is tracked.  ``backward`` may be called exactly once,
    after which the tape is consumed: further recording or a second
    backward raises.  Independent Tape instances on different threads do
    not interact (the active tape is thread-local).
    """

    __slots__ = ("_inputs", "_backs", "_kinds", "_grads", "_consumed", "visit_count", "_prev")

    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._backs: list[Callable] = []
        self._kinds: list[str] = []
        self._grads: list[np.ndarray | None] | None = None
        self._consumed = False
        self.visit_count = 0
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._kinds)

    def _record(self, kind: str, input_ids: tuple[int, ...], back: Callable) -> int:
        if self._consumed:
            raise AutodiffError("tape already consumed by backward; create a new one")
        self._inputs.append(input_ids)
        self._backs.append(back)
        self._kinds.append(kind)
        return len(self._kinds) - 1

    def watch(self, tensor) -> Tensor:
        """Register a leaf and return a tracked view of ``tensor``."""
        t = as_tensor(tensor)
        node = self._record("leaf", (), _leaf_back)
        return Tensor(t.values, node)

    def backward(self, loss: Tensor) -> None:
        """Backpropagate from a scalar loss; each node is visited once."""
        if self._consumed:
            raise AutodiffError("tape already consumed by backward")
        if loss.node is None:
            raise AutodiffError("loss is not tracked on this tape")
        if loss.values.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        n = len(self._kinds)
        if loss.node >= n:
            raise AutodiffError("loss node does not belong to this tape")
        grads: list[np.ndarray | None] = [None] * n
        grads[loss.node] = np.ones((), dtype=np.float64)
        visits = 0
        for i in range(n - 1, -1, -1):
            visits += 1
            g = grads[i]
            if g is None:
                continue
            in_ids = self._inputs[i]
            if not in_ids:
                continue
            for j, gj in zip(in_ids, self._backs[i](g)):
                if j < 0 or gj is None:
                    continue
                cur = grads[j]
                grads[j] = gj if cur is None else cur + gj
        self.visit_count = visits
        self._grads = grads
        self._consumed = True
        # backward closures are no longer needed; free them eagerly
        self._backs = []

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. a tracked tensor (zeros if unreached)."""
        if self._grads is None:
            raise AutodiffError("call backward before asking for gradients")
        if tensor.node is None:
            raise AutodiffError("cannot take the gradient of an untracked tensor")
        g = self._grads[tensor.node]
        if g is None:
            return np.zeros(tensor.shape, dtype=np.float64)
        return g


def _leaf_back(g):  # pragma: no cover - never called (leaves have no inputs)
    return ()


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def _finite_or_raise(kind: str, values: np.ndarray) -> None:
    # One C-level reduction instead of an isfinite temporary: the sum of a
    # float64 array is non-finite iff some element is (NaN and inf both
    # propagate).  A finite sum of non-finite inputs cannot happen; the
    # reverse (overflowing sum of finite values) is re-screened exactly.
    if math.isfinite(values.sum()):
        return
    if np.all(np.isfinite(values)):
        return
    raise NonFiniteError(f"op '{kind}' produced non-finite values")


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], back_builder) -> Tensor:
    """Shared tail of every op: finite check, optional recording."""
    _finite_or_raise(kind, out)
    tape = _active_tape()
    if tape is None:
        return Tensor(out)
    # unrolled for the dominant arities; this is the hottest line of a
    # training step
    k = len(inputs)
    if k == 1:
        n0 = inputs[0].node
        if n0 is None:
            return Tensor(out)
        ids: tuple[int, ...] = (n0,)
    elif k == 2:
        n0 = inputs[0].node
        n1 = inputs[1].node
        if n0 is None and n1 is None:
            return Tensor(out)
        ids = (-1 if n0 is None else n0, -1 if n1 is None else n1)
    else:
        ids = tuple(-1 if t.node is None else t.node for t in inputs)
        if all(i < 0 for i in ids):
            return Tensor(out)
    node = tape._record(kind, ids, back_builder())
    return Tensor(out, node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av + bv
    ash, bsh = av.shape, bv.shape

    def build():
        def back(g):
            return _unbroadcast(g, ash), _unbroadcast(g, bsh)

        return back

    return _emit("add", out, (a, b), build)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av - bv
    ash, bsh = av.shape, bv.shape

    def build():
        def back(g):
            return _unbroadcast(g, ash), -_unbroadcast(g, bsh)

        return back

    return _emit("subtract", out, (a, b), build)


def hadamard(a, b) -> Tensor:
    """Elementwise product (with numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av * bv
    ash, bsh = av.shape, bv.shape

    def build():
        def back(g):
            return _unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)

        return back

    return _emit("hadamard", out, (a, b), build)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    ash, bsh = av.shape, bv.shape

    def build():
        def back(g):
            return _unbroadcast(g / bv, ash), _unbroadcast(-g * out / bv, bsh)

        return back

    return _emit("divide", out, (a, b), build)


def scale(a, factor: float) -> Tensor:
    """Multiply by a plain python scalar (recorded with a constant factor)."""
    a = as_tensor(a)
    f = float(factor)
    out = a.values * f

    def build():
        def back(g):
            return (g * f,)

        return back

    return _emit("scale", out, (a,), build)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = -a.values

    def build():
        def back(g):
            return (-g,)

        return back

    return _emit("neg", out, (a,), build)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)

    def build():
        def back(g):
            return (g * (1.0 - out * out),)

        return back

    return _emit("tanh", out, (a,), build)


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.sin(av)

    def build():
        def back(g):
            return (g * np.cos(av),)

        return back

    return _emit("sin", out, (a,), build)


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.cos(av)

    def build():
        def back(g):
            return (-g * np.sin(av),)

        return back

    return _emit("cos", out, (a,), build)


def atan(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = np.arctan(av)

    def build():
        def back(g):
            return (g / (1.0 + av * av),)

        return back

    return _emit("atan", out, (a,), build)


def atan2(y, x) -> Tensor:
    """Two-argument arctangent, differentiable in both arguments."""
    y, x = as_tensor(y), as_tensor(x)
    yv, xv = y.values, x.values
    out = np.arctan2(yv, xv)
    ysh, xsh = yv.shape, xv.shape

    def build():
        def back(g):
            denom = xv * xv + yv * yv
            return (
                _unbroadcast(g * xv / denom, ysh),
                _unbroadcast(-g * yv / denom, xsh),
            )

        return back

    return _emit("atan2", out, (y, x), build)


def absolute(a) -> Tensor:
    """|a| with subgradient sign(a) (zero at the kink)."""
    a = as_tensor(a)
    av = a.values
    out = np.abs(av)

    def build():
        def back(g):
            return (g * np.sign(av),)

        return back

    return _emit("abs", out, (a,), build)


def clamp_min(a, bound: float) -> Tensor:
    """max(a, bound) elementwise; gradient is zero in the clamped region."""
    a = as_tensor(a)
    av = a.values
    b = float(bound)
    out = np.maximum(av, b)

    def build():
        def back(g):
            return (g * (av > b),)

        return back

    return _emit("clamp_min", out, (a,), build)


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = av * av

    def build():
        def back(g):
            return (2.0 * g * av,)

        return back

    return _emit("square", out, (a,), build)


def sqrt_elementwise(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if np.any(av < 0):
        raise AutodiffError("sqrt_elementwise of a negative value")
    out = np.sqrt(av)

    def build():
        def back(g):
            return (g / (2.0 * out),)

        return back

    return _emit("sqrt_elementwise", out, (a,), build)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with leading-dimension broadcasting (operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(
            f"matmul needs operands with >= 2 dims, got {av.shape} @ {bv.shape}"
        )
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)
    ash, bsh = av.shape, bv.shape

    def build():
        def back(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), ash)
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bsh)
            return ga, gb

        return back

    return _emit("matmul", out, (a, b), build)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got shape {a.shape}")
    out = np.swapaxes(a.values, -1, -2)

    def build():
        def back(g):
            return (np.swapaxes(g, -1, -2),)

        return back

    return _emit("transpose", out, (a,), build)


def outer(a, b) -> Tensor:
    """Outer product of two vectors."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 1 or bv.ndim != 1:
        raise ShapeError(f"outer needs 1-D operands, got {av.shape}, {bv.shape}")
    out = np.outer(av, bv)

    def build():
        def back(g):
            return g @ bv, g.T @ av

        return back

    return _emit("outer", out, (a, b), build)


def _tril_halve_diag(x: np.ndarray) -> np.ndarray:
    """Lower triangle of x with the diagonal scaled by one half."""
    out = np.tril(x)
    idx = np.arange(x.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def _chol_diagnose(m: np.ndarray) -> None:
    """Re-run a scalar factorization to name the first failing pivot."""
    flat = m.reshape(-1, m.shape[-1], m.shape[-1])
    for a in flat:
        n = a.shape[0]
        l = np.zeros_like(a)
        for j in range(n):
            d = a[j, j] - l[j, :j] @ l[j, :j]
            if d <= 0.0:
                raise NotPositiveDefiniteError(j, float(d))
            l[j, j] = np.sqrt(d)
            for i in range(j + 1, n):
                l[i, j] = (a[i, j] - l[i, :j] @ l[j, :j]) / l[j, j]
    raise NotPositiveDefiniteError(-1, float("nan"))  # pragma: no cover


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of (stacked) SPD matrices.

    Only the lower triangle of the input is read.  The reverse rule is the
    closed-form triangular expression, so gradients through factorizations
    are exact rather than iterative.
    """
    a = as_tensor(a)
    av = a.values
    if av.ndim < 2 or av.shape[-1] != av.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got shape {av.shape}")
    try:
        lv = np.linalg.cholesky(av)
    except np.linalg.LinAlgError:
        _chol_diagnose(av)
        raise  # pragma: no cover

    def build():
        def back(g):
            # P = phi(L^T G); dA = phi(L^-T (P + P^T) L^-1), lower triangle only.
            p = _tril_halve_diag(np.swapaxes(lv, -1, -2) @ g)
            sym = p + np.swapaxes(p, -1, -2)
            half = _lt_solve_raw(lv, sym, transpose_l=True)
            da = np.swapaxes(
                _lt_solve_raw(lv, np.swapaxes(half, -1, -2), transpose_l=True), -1, -2
            )
            return (_tril_halve_diag(da),)

        return back

    return _emit("cholesky", lv, (a,), build)


def _lt_solve_raw(l: np.ndarray, b: np.ndarray, transpose_l: bool) -> np.ndarray:
    """Solve L x = b (or L^T x = b) by substitution, vectorized over leading dims."""
    n = l.shape[-1]
    lead = np.broadcast_shapes(l.shape[:-2], b.shape[:-2])
    x = np.empty(lead + b.shape[-2:], dtype=np.float64)
    if not transpose_l:
        for i in range(n):
            acc = b[..., i, :]
            if i:
                acc = acc - np.einsum("...j,...jk->...k", l[..., i, :i], x[..., :i, :])
            x[..., i, :] = acc / l[..., i, i, None]
    else:
        for i in range(n - 1, -1, -1):
            acc = b[..., i, :]
            if i < n - 1:
                acc = acc - np.einsum(
                    "...j,...jk->...k", l[..., i + 1 :, i], x[..., i + 1 :, :]
                )
            x[..., i, :] = acc / l[..., i, i, None]
    return x


def lower_triangular_solve(l, b, transpose_l: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular L.

    L's strict upper triangle is ignored and receives no gradient.
    """
    l, b = as_tensor(l), as_tensor(b)
    lv, bv = l.values, b.values
    if lv.ndim < 2 or lv.shape[-1] != lv.shape[-2]:
        raise ShapeError(f"solve needs a square triangular matrix, got {lv.shape}")
    if bv.ndim < 2 or bv.shape[-2] != lv.shape[-1]:
        raise ShapeError(f"solve shape mismatch: {lv.shape} vs rhs {bv.shape}")
    xv = _lt_solve_raw(lv, bv, transpose_l)
    lsh, bsh = lv.shape, bv.shape
    tl = transpose_l

    def build():
        def back(g):
            gb = _lt_solve_raw(lv, g, not tl)
            da = -np.matmul(gb, np.swapaxes(xv, -1, -2))
            if tl:
                da = np.swapaxes(da, -1, -2)
            return _unbroadcast(np.tril(da), lsh), _unbroadcast(gb, bsh)

        return back

    return _emit("lower_triangular_solve", xv, (l, b), build)


# ---------------------------------------------------------------------------
# shape / reduction ops
# ---------------------------------------------------------------------------


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = av.sum(axis=axis)
    ash = av.shape

    def build():
        def back(g):
            if axis is None:
                return (np.broadcast_to(g, ash).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), ash).copy(),)

        return back

    return _emit("sum", out, (a,), build)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = av.mean(axis=axis)
    ash = av.shape
    count = av.size if axis is None else av.shape[axis]

    def build():
        def back(g):
            if axis is None:
                return (np.broadcast_to(g / count, ash).copy(),)
            return (np.broadcast_to(np.expand_dims(g / count, axis), ash).copy(),)

        return back

    return _emit("mean", out, (a,), build)


def take(a, key) -> Tensor:
    """Basic slicing/indexing; backward scatters into zeros."""
    a = as_tensor(a)
    av = a.values
    out = np.asarray(av[key], dtype=np.float64)
    ash = av.shape

    def build():
        def back(g):
            z = np.zeros(ash, dtype=np.float64)
            z[key] = g
            return (z,)

        return back

    return _emit("slice", out, (a,), build)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    vals = [t.values for t in ts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]

    def build():
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        return back

    return _emit("concat", out, ts, build)


def stack(tensors: Iterable, axis: int = -1) -> Tensor:
    """Stack along a new axis, broadcasting the inputs to a common shape.

    The broadcast matters in batched filter code, where per-state slices
    carry a sigma-point axis that per-control slices lack.
    """
    ts = [as_tensor(t) for t in tensors]
    shapes = [t.values.shape for t in ts]
    common = np.broadcast_shapes(*shapes)
    out = np.stack([np.broadcast_to(t.values, common) for t in ts], axis=axis)

    def build():
        def back(g):
            parts = np.moveaxis(g, axis, 0)
            return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))

        return back

    return _emit("stack", out, ts, build)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = av.reshape(shape).copy()
    ash = av.shape

    def build():
        def back(g):
            return (g.reshape(ash),)

        return back

    return _emit("reshape", out, (a,), build)


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------

_DISPATCH: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "hadamard": hadamard,
    "divide": divide,
    "scale": scale,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "atan": atan,
    "atan2": atan2,
    "abs": absolute,
    "clamp_min": clamp_min,
    "square": square,
    "sqrt_elementwise": sqrt_elementwise,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "slice": take,
    "concat": concat,
    "stack": stack,
    "reshape": reshape,
    "outer": outer,
    "cholesky": cholesky,
    "lower_triangular_solve": lower_triangular_solve,
}


def fused_op(kind: str, out: np.ndarray, inputs: Sequence, back: Callable) -> Tensor:
    """Record one hand-fused op with a caller-supplied backward.

    Model code uses this to collapse a hot arithmetic block into a single
    tape node: ``out`` is the forward result computed with plain numpy,
    and ``back(g)`` must return one gradient per input (``None`` for
    inputs that do not need one), each already reduced to that input's
    shape (see :func:`unbroadcast`).  The caller is responsible for the
    correctness of ``back``; keep every fused op covered by a finite-
    difference test.
    """
    ts = tuple(as_tensor(t) for t in inputs)

    def build():
        return back

    return _emit(kind, np.asarray(out, dtype=np.float64), ts, build)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting.

    The inverse of broadcasting for reverse mode; exposed for fused-op
    backward implementations.
    """
    return _unbroadcast(g, shape)


def record_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs`` (recording if appropriate).

    This is the uniform entry point; the named functions above are the
    ergonomic spellings of the same table.
    """
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise AutodiffError(
            f"unsupported op kind '{kind}' (known: {', '.join(sorted(_DISPATCH))})"
        )
    if kind in ("concat", "stack"):
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------


class ParameterSet:
    """An ordered, named collection of leaf tensors.

    The master copies live here as plain arrays; ``tracked`` produces the
    per-rollout watched views that model code consumes.  Flat views are in
    name-insertion order, one contiguous row-major block per tensor.
    """

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def add(self, name: str, values) -> None:
        if name in self._data:
            raise KeyError(f"parameter '{name}' already present")
        self._data[name] = np.array(values, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, values) -> None:
        arr = np.asarray(values, dtype=np.float64)
        if name in self._data and arr.shape != self._data[name].shape:
            raise ShapeError(
                f"assigning shape {arr.shape} to parameter '{name}' of shape "
                f"{self._data[name].shape}"
            )
        self._data[name] = arr.copy()

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def __len__(self) -> int:
        return len(self._data)

    @property
    def n_values(self) -> int:
        return sum(v.size for v in self._data.values())

    def tracked(self, tape: Tape) -> dict[str, Tensor]:
        """Watch every parameter on ``tape``; returns name -> tracked Tensor."""
        return {k: tape.watch(v) for k, v in self._data.items()}

    def untracked(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._data.items()}

    def flat(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def assign_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_values:
            raise ShapeError(f"flat vector has {vec.size} values, need {self.n_values}")
        i = 0
        for k, v in self._data.items():
            self._data[k] = vec[i : i + v.size].reshape(v.shape).copy()
            i += v.size

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for k, v in self._data.items():
            out.add(k, v)
        return out


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: ParameterSet,
    *,
    sample: int | None = None,
    eps: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` maps a name->Tensor binding to a scalar Tensor and is
    re-evaluated from scratch for every probe, so it must be pure.  When
    ``sample`` is given, that many flat coordinates are probed (seeded
    choice without replacement); otherwise every coordinate is.
    """
    with Tape() as tape:
        bound = params.tracked(tape)
        loss = loss_fn(bound)
        tape.backward(loss)
        analytic = np.concatenate(
            [tape.grad(bound[k]).ravel() for k in params.names()]
        )

    base = params.flat()
    total = base.size
    if sample is None or sample >= total:
        idx = np.arange(total)
    else:
        idx = np.random.default_rng(seed).choice(total, size=sample, replace=False)
        idx.sort()

    work = params.copy()
    worst = 0.0
    for i in idx:
        h = eps * max(1.0, abs(base[i]))
        probe = base.copy()
        probe[i] = base[i] + h
        work.assign_flat(probe)
        up = loss_fn(work.untracked()).item()
        probe[i] = base[i] - h
        work.assign_flat(probe)
        down = loss_fn(work.untracked()).item()
        fd = (up - down) / (2.0 * h)
        a = analytic[i]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
        worst = max(worst, rel)
    return worst
