"""Dense 2-D tensors with a define-by-run tape for reverse-mode gradients.

Every op takes and returns :class:`Tensor` objects holding float64 arrays of
shape ``(rows, cols)``.  When a :class:`Tape` is active (``with Tape() as t``)
ops whose inputs require gradients are recorded, and ``t.backward(loss)``
walks the records in reverse.  Outside a tape ops just compute.

An optional :func:`count_ops` context tallies FLOPs and output bytes per op;
the analytic cost model in :mod:`g2lformer.benchkit` is checked against it.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class DegeneracyError(ArithmeticError):
    pass


class Tensor:
    """Immutable-by-convention 2-D float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "name", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.zeros((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor._wrap(np.ones((rows, cols)))


@dataclass(frozen=True)
class SparseCSR:
    """Constant sparse matrix in CSR form."""

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _mat: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if ro.shape != (self.rows + 1,) or ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise ShapeError("row_offsets must be nondecreasing, length rows+1, starting at 0")
        if ro[-1] != ci.size or ci.size != vals.size:
            raise ShapeError("row_offsets[-1], col_indices and values disagree on nnz")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise ShapeError("column index out of range")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("sparse values must be finite")
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", vals)
        mat = sp.csr_matrix((vals, ci, ro), shape=(self.rows, self.cols))
        object.__setattr__(self, "_mat", mat)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        for i in range(self.rows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] += self.values[lo:hi]
        return out

    @classmethod
    def identity(cls, n: int) -> "SparseCSR":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def from_scipy(cls, m) -> "SparseCSR":
        m = sp.csr_matrix(m)
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class Tape:
    """Ordered op records for one forward pass; supports exactly one backward."""

    def __init__(self):
        self.records: list[_Record] = []
        self._spent = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.records)

    def _push(self, kind, inputs, out, vjp):
        out.requires_grad = True
        out.node_id = len(self.records)
        self.records.append(_Record(kind, inputs, out, vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a 1x1 ``loss`` for every learnable leaf reached.

        Leaves listed in ``wrt`` that the loss does not depend on get zeros.
        """
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if self._spent:
            raise ContractError("backward already ran on this tape; record a new forward pass")
        if loss.node_id is None or loss.node_id >= len(self.records) or self.records[loss.node_id].output is not loss:
            raise ContractError("loss was not recorded on this tape")
        self._spent = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        leaves: dict[Tensor, np.ndarray] = {}
        for rec in reversed(self.records[: loss.node_id + 1]):
            g = pending.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id is None:
                    prev = leaves.get(inp)
                    leaves[inp] = gi.copy() if prev is None else prev + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
        if wrt is not None:
            for leaf in wrt:
                if leaf not in leaves:
                    leaves[leaf] = np.zeros(leaf.shape)
        return leaves


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, wrt)


# ---------------------------------------------------------------------------
# op accounting


@dataclass
class OpCounter:
    flops: int = 0
    bytes: int = 0
    by_kind: dict[str, int] = field(default_factory=dict)


_COUNTER: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("counter", default=None)
_PATTERN: contextvars.ContextVar[list | None] = contextvars.ContextVar("pattern", default=None)


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Tally FLOPs and output bytes of every op executed in the block."""
    c = OpCounter()
    token = _COUNTER.set(c)
    try:
        yield c
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def kink_pattern() -> Iterator[list]:
    """Collect the sign pattern of every piecewise-linear op in the block."""
    pat: list = []
    token = _PATTERN.set(pat)
    try:
        yield pat
    finally:
        _PATTERN.reset(token)


def _emit(kind: str, arr: np.ndarray, inputs: tuple[Tensor, ...], vjp, flops: int) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{kind} produced non-finite values")
    out = Tensor._wrap(arr)
    c = _COUNTER.get()
    if c is not None:
        c.flops += int(flops)
        c.bytes += arr.size * 8
        c.by_kind[kind] = c.by_kind.get(kind, 0) + int(flops)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._push(kind, inputs, out, vjp)
    return out


def _check_same(kind: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", A @ B, (a, b), vjp, 2 * a.rows * a.cols * b.cols)


def spmm(s: SparseCSR, d: Tensor) -> Tensor:
    """Sparse (constant) times dense; gradient flows to ``d`` only."""
    if s.cols != d.rows:
        raise ShapeError(f"spmm: cannot multiply sparse {s.shape} by {d.shape}")
    m = s._mat

    def vjp(g):
        return (np.asarray(m.T @ g),)

    out = np.asarray(m @ d.data) if s.nnz else np.zeros((s.rows, d.cols))
    return _emit("spmm", out, (d,), vjp, 2 * s.nnz * d.cols)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g), a.data.size)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g), a.data.size)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A), A.size)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    A, B = a.data, b.data
    out = A / B
    return _emit("div", out, (a, b), lambda g: (g / B, -g * out / B), A.size)


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", t.data * c, (t,), lambda g: (g * c,), t.data.size)


def add_scalar(t: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", t.data + float(c), (t,), lambda g: (g,), t.data.size)


def reciprocal(t: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / t.data
    return _emit("reciprocal", out, (t,), lambda g: (-g * out * out,), t.data.size)


def add_row(t: Tensor, row: Tensor) -> Tensor:
    """``t + row`` with a 1 x cols row broadcast over rows (bias add)."""
    if row.rows != 1 or row.cols != t.cols:
        raise ShapeError(f"add_row: row {row.shape} does not broadcast over {t.shape}")

    def vjp(g):
        return g, g.sum(axis=0, keepdims=True)

    return _emit("add_row", t.data + row.data, (t, row), vjp, t.data.size)


def mul_row(t: Tensor, row: Tensor) -> Tensor:
    """Per-column scaling by a 1 x cols row."""
    if row.rows != 1 or row.cols != t.cols:
        raise ShapeError(f"mul_row: row {row.shape} does not broadcast over {t.shape}")
    T, R = t.data, row.data

    def vjp(g):
        return g * R, (g * T).sum(axis=0, keepdims=True)

    return _emit("mul_row", T * R, (t, row), vjp, T.size)


def hadamard_broadcast(h: Tensor, g: Tensor) -> Tensor:
    """Scale row i of ``h`` by ``g[i]``; ``g`` must be an N x 1 column."""
    if g.cols != 1 or g.rows != h.rows:
        raise ShapeError(f"hadamard_broadcast: gate {g.shape} is not an {h.rows}x1 column")
    H, G = h.data, g.data

    def vjp(gr):
        return gr * G, (gr * H).sum(axis=1, keepdims=True)

    return _emit("hadamard_broadcast", H * G, (h, g), vjp, H.size)


def div_scalar(t: Tensor, s: Tensor) -> Tensor:
    """``t / s`` for a 1x1 tensor ``s``."""
    if s.shape != (1, 1):
        raise ShapeError(f"div_scalar: divisor must be 1x1, got {s.shape}")
    T, S = t.data, s.data[0, 0]
    out = T / S

    def vjp(g):
        return g / S, np.array([[-(g * out).sum() / S]])

    return _emit("div_scalar", out, (t, s), vjp, T.size)


def transpose(t: Tensor) -> Tensor:
    return _emit("transpose", t.data.T.copy(), (t,), lambda g: (g.T,), 0)


def sum_rows(t: Tensor) -> Tensor:
    """Column sums as a 1 x cols row (i.e. ``1ᵀ t``)."""
    n = t.rows
    return _emit("sum_rows", t.data.sum(axis=0, keepdims=True), (t,),
                 lambda g: (np.broadcast_to(g, (n, g.shape[1])).copy(),), t.data.size)


def mean_rows(t: Tensor) -> Tensor:
    n = t.rows
    return _emit("mean_rows", t.data.mean(axis=0, keepdims=True), (t,),
                 lambda g: (np.broadcast_to(g / n, (n, g.shape[1])).copy(),), t.data.size)


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return _emit("sum_all", np.array([[t.data.sum()]]), (t,),
                 lambda g: (np.full(shape, g[0, 0]),), t.data.size)


def mean_all(t: Tensor) -> Tensor:
    shape, n = t.shape, t.data.size
    return _emit("mean_all", np.array([[t.data.mean()]]), (t,),
                 lambda g: (np.full(shape, g[0, 0] / n),), n)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts differ ({a.shape} vs {b.shape})")
    k = a.cols
    return _emit("concat_cols", np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :k], g[:, k:]), 0)


def slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= t.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside 0..{t.cols}")
    shape = t.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", t.data[:, start:stop].copy(), (t,), vjp, 0)


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = t.rows

    def vjp(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", t.data[idx], (t,), vjp, 0)


def scatter_add_rows(t: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Row ``k`` of ``t`` is added into output row ``idx[k]`` (segment sum)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (t.rows,):
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for {t.rows} rows")
    out = np.zeros((n, t.cols))
    np.add.at(out, idx, t.data)
    return _emit("scatter_add_rows", out, (t,), lambda g: (g[idx],), t.data.size)


def select(t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Entries ``t[rows[k], cols[k]]`` as a K x 1 column."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = t.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _emit("select", t.data[rows, cols].reshape(-1, 1), (t,), vjp, 0)


def log_softmax(t: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by max subtraction."""
    X = t.data
    shifted = X - X.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", out, (t,), vjp, 3 * X.size)


def abs_(t: Tensor) -> Tensor:
    X = t.data
    pat = _PATTERN.get()
    if pat is not None:
        pat.append(X > 0)
    sign = np.where(X >= 0, 1.0, -1.0)
    return _emit("abs", np.abs(X), (t,), lambda g: (g * sign,), X.size)


def apply_activation(t: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    """Elementwise ``sigmoid``, ``relu`` or ``leaky_relu``.

    The derivative at exactly 0 is the positive-side slope.
    """
    X = t.data
    if kind == "sigmoid":
        out = expit(X)
        return _emit("sigmoid", out, (t,), lambda g: (g * out * (1.0 - out),), X.size)
    if kind == "relu":
        neg = 0.0
    elif kind == "leaky_relu":
        neg = float(slope)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    pat = _PATTERN.get()
    if pat is not None:
        pat.append(X >= 0)
    d = np.where(X >= 0, 1.0, neg)
    return _emit(kind, X * d, (t,), lambda g: (g * d,), X.size)


def frobenius_norm(t: Tensor) -> Tensor:
    """sqrt of the sum of squares, as a 1x1 tensor."""
    if t.data.size == 0:
        raise ShapeError("frobenius_norm of an empty tensor")
    X = t.data
    nrm = float(np.sqrt(np.sum(X * X)))

    def vjp(g):
        if nrm == 0.0:
            return (np.zeros_like(X),)
        return (g[0, 0] * X / nrm,)

    return _emit("frobenius_norm", np.array([[nrm]]), (t,), vjp, 2 * X.size)


# ---------------------------------------------------------------------------
# parameters and gradient checking


class ParamStore:
    """Ordered name -> learnable tensor map with seeded Glorot initialization."""

    def __init__(self, seed: int | None = None):
        self._params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def glorot(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, rows: int, cols: int) -> Tensor:
        return self.add(name, np.zeros((rows, cols)))

    def constant(self, name: str, rows: int, cols: int, value: float) -> Tensor:
        return self.add(name, np.full((rows, cols), float(value)))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            t = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"{k}: expected {t.shape}, got {v.shape}")
            t.data = v.copy()


class NonFiniteGradient(ArithmeticError):
    pass


@dataclass
class GradReport:
    max_rel_error: float
    passed: bool
    step: float
    tolerance: float
    per_param: dict[str, float]
    checked: int
    skipped_kinks: int

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} max_rel_err={self.max_rel_error:.3e} (tol {self.tolerance:.0e}, "
                f"{self.checked} entries, {self.skipped_kinks} kinks skipped)")


def grad_check(model_fn: Callable[[], Tensor], params: ParamStore, tolerance: float = 1e-5,
               step: float = 1e-6, samples: int = 32, seed: int = 0) -> GradReport:
    """Compare tape gradients of ``model_fn()`` with central differences.

    ``model_fn`` must rebuild its scalar output from the current parameter
    values on every call.  Entries whose perturbation flips any ReLU-type
    sign pattern are skipped as kinks.
    """
    with Tape() as tape:
        loss = model_fn()
    grads = tape.backward(loss, wrt=params.values())
    for name, t in params.items():
        if not np.all(np.isfinite(grads[t])):
            raise NonFiniteGradient(f"non-finite gradient for {name}")

    with kink_pattern() as base:
        model_fn()

    def pattern_eval():
        with kink_pattern() as pat:
            val = model_fn().item()
        same = len(pat) == len(base) and all(np.array_equal(a, b) for a, b in zip(pat, base))
        return val, same

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    checked = skipped = 0
    for name, t in params.items():
        size = t.data.size
        idx = np.arange(size) if size <= samples else np.sort(rng.choice(size, samples, replace=False))
        orig = t.data
        worst = 0.0
        for flat in idx:
            r, c = divmod(int(flat), t.cols)
            pert = orig.copy()
            pert[r, c] = orig[r, c] + step
            t.data = pert
            f_plus, ok_plus = pattern_eval()
            pert = orig.copy()
            pert[r, c] = orig[r, c] - step
            t.data = pert
            f_minus, ok_minus = pattern_eval()
            t.data = orig
            if not (ok_plus and ok_minus):
                skipped += 1
                continue
            fd = (f_plus - f_minus) / (2 * step)
            ad = grads[t][r, c]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
            checked += 1
        per_param[name] = worst
    max_err = max(per_param.values(), default=0.0)
    return GradReport(max_err, max_err <= tolerance, step, tolerance, per_param, checked, skipped)
