"""Dense/sparse matrices, a reverse-mode tape, Adam, and a finite-difference checker.

Every dense value is a 2-D ``float64`` numpy array. Scalars are ``1x1``.
Differentiable operations are methods on :class:`Tape`; each call computes
its forward value immediately and, when any input requires a gradient,
records a backward rule. :meth:`Tape.backward` replays those rules in
reverse execution order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericError

__all__ = [
    "SparseMatrix",
    "Tensor",
    "Parameter",
    "Tape",
    "Adam",
    "adam_step",
    "finite_diff_grad",
    "as_dense",
]


def as_dense(x) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a matrix, got array of rank {a.ndim}")
    return np.ascontiguousarray(a)


class SparseMatrix:
    """Compressed sparse row matrix with validated structure.

    Column indices inside a row must be strictly increasing. The product
    with a dense matrix delegates to scipy's CSR kernel, which reduces each
    row sequentially in storage order.
    """

    __slots__ = ("rows", "cols", "indptr", "indices", "data", "_csr")

    def __init__(self, rows: int, cols: int, indptr, indices, data, check: bool = True):
        self.rows = int(rows)
        self.cols = int(cols)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        if check:
            self._validate()
        self._csr = sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.rows, self.cols)
        )

    def _validate(self):
        p = self.indptr
        if p.shape != (self.rows + 1,):
            raise DimensionError(f"row offsets must have length {self.rows + 1}, got {p.shape[0]}")
        if p[0] != 0 or p[-1] != self.indices.shape[0] or np.any(np.diff(p) < 0):
            raise DimensionError("row offsets must start at 0, be non-decreasing and end at nnz")
        if self.indices.shape != self.data.shape:
            raise DimensionError("column indices and values differ in length")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= self.cols:
                raise DimensionError(f"column index out of range for {self.cols} columns")
            # strictly increasing within each row
            d = np.diff(self.indices)
            row_start = np.zeros(self.indices.size, dtype=bool)
            row_start[p[1:-1][p[1:-1] < self.indices.size]] = True
            if np.any((d <= 0) & ~row_start[1:]):
                raise DimensionError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("sparse matrix holds non-finite values")

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v=None) -> "SparseMatrix":
        """Build from coordinate triplets; duplicate coordinates are summed."""
        r = np.asarray(r, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64)
        v = np.ones(r.shape[0]) if v is None else np.asarray(v, dtype=np.float64)
        m = sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(rows, cols, m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = as_dense(a)
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        t = self._csr.T.tocsr()
        t.sort_indices()
        return SparseMatrix(self.cols, self.rows, t.indptr, t.indices, t.data, check=False)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def dot(self, d: np.ndarray) -> np.ndarray:
        if self.cols != d.shape[0]:
            raise DimensionError(f"cannot multiply sparse {self.shape} by dense {d.shape}")
        return np.asarray(self._csr @ d)

    def tdot(self, d: np.ndarray) -> np.ndarray:
        """Compute ``self.T @ d`` without materialising the transpose."""
        if self.rows != d.shape[0]:
            raise DimensionError(f"cannot multiply transposed sparse {self.shape} by dense {d.shape}")
        return np.asarray(self._csr.T @ d)

    def __eq__(self, other):
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


class Tensor:
    """A dense matrix node that may participate in gradient computation."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = as_dense(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.value, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"{type(self).__name__}{tag}(shape={self.shape})"


class Parameter(Tensor):
    """Trainable matrix with accumulated gradient and Adam moment state."""

    __slots__ = ("m", "v", "step")

    def __init__(self, value, name: str | None = None):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Set ``enabled=False`` for inference: operations still compute values but
    nothing is recorded.
    """

    enabled: bool = True
    records: list = field(default_factory=list)
    clamp_count: int = 0

    # -- bookkeeping -----------------------------------------------------

    def _emit(self, op, value, inputs, backward) -> Tensor:
        needs = self.enabled and any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self.records.append(_Record(op, out, tuple(inputs), backward))
        return out

    def backward(self, loss: Tensor, seed: float = 1.0):
        """Propagate ``d(seed * loss)`` to every leaf that requires a gradient.

        Leaf gradients are added into ``leaf.grad`` so repeated uses of a
        parameter accumulate; callers zero them between steps.
        """
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got {loss.shape}")
        produced = {id(r.out) for r in self.records}
        grads = {id(loss): np.full(loss.shape, float(seed))}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.value)
                    t.grad += gi

    def first_nonfinite(self) -> str | None:
        """Name the earliest recorded op whose output is not finite."""
        for i, rec in enumerate(self.records):
            if not np.all(np.isfinite(rec.out.value)):
                return f"#{i} {rec.op} -> shape {rec.out.shape}"
        return None

    # -- linear algebra ------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        av, bv = a.value, b.value
        return self._emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def matmul_nt(self, a: Tensor, b: Tensor) -> Tensor:
        """``a @ b.T``; used for score matrices between two embedding sets."""
        if a.shape[1] != b.shape[1]:
            raise DimensionError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}^T")
        av, bv = a.value, b.value
        return self._emit("matmul_nt", av @ bv.T, (a, b), lambda g: (g @ bv, g.T @ av))

    def spmm(self, s: SparseMatrix, d: Tensor) -> Tensor:
        if s.cols != d.shape[0]:
            raise DimensionError(f"spmm shape mismatch: sparse {s.shape} x {d.shape}")
        return self._emit("spmm", s.dot(d.value), (d,), lambda g: (s.tdot(g),))

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return self._emit("add", a.value + b.value, (a, b), lambda g: (g, g))

    def add_row(self, x: Tensor, bias: Tensor) -> Tensor:
        """Add a ``1 x k`` bias to every row of ``x``."""
        if bias.shape != (1, x.shape[1]):
            raise DimensionError(f"bias shape {bias.shape} does not fit {x.shape}")
        return self._emit(
            "add_row", x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True))
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
        return self._emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit("scale", x.value * c, (x,), lambda g: (g * c,))

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._emit(
            "sum", np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),)
        )

    def concat_cols(self, x: Tensor, y: Tensor) -> Tensor:
        if x.shape[0] != y.shape[0]:
            raise DimensionError(f"concat_cols row mismatch: {x.shape} vs {y.shape}")
        k = x.shape[1]
        return self._emit(
            "concat_cols",
            np.concatenate([x.value, y.value], axis=1),
            (x, y),
            lambda g: (g[:, :k], g[:, k:]),
        )

    def gather_rows(self, x: Tensor, idx) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        n = x.shape[0]
        bad = idx[(idx < 0) | (idx >= n)]
        if bad.size:
            raise IndexError(f"row index {int(bad[0])} out of range for {n} rows")

        def back(g):
            out = np.zeros_like(x.value)
            np.add.at(out, idx, g)
            return (out,)

        return self._emit("gather_rows", x.value[idx], (x,), back)

    def row_dot(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-row inner products as an ``n x 1`` column."""
        if a.shape != b.shape:
            raise DimensionError(f"row_dot shape mismatch: {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._emit(
            "row_dot",
            np.einsum("ij,ij->i", av, bv)[:, None],
            (a, b),
            lambda g: (g * bv, g * av),
        )

    def pick(self, x: Tensor, cols) -> Tensor:
        """Column vector of ``x[i, cols[i]]``."""
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        if cols.shape[0] != x.shape[0]:
            raise DimensionError(f"pick needs one column per row: {cols.shape[0]} vs {x.shape[0]}")
        rows = np.arange(x.shape[0])

        def back(g):
            out = np.zeros_like(x.value)
            out[rows, cols] = g[:, 0]
            return (out,)

        return self._emit("pick", x.value[rows, cols][:, None], (x,), back)

    # -- nonlinearities --------------------------------------------------

    def relu(self, x: Tensor) -> Tensor:
        mask = x.value > 0
        return self._emit("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def grl(self, x: Tensor, reverse: bool = True) -> Tensor:
        """Gradient reversal: identity forward, negated gradient backward.

        With ``reverse=False`` the layer is a plain identity in both passes.
        """
        sign = -1.0 if reverse else 1.0
        return self._emit("grl", x.value.copy(), (x,), lambda g: (sign * g,))

    def frobenius_sq(self, x: Tensor) -> Tensor:
        xv = x.value
        return self._emit(
            "frobenius_sq", np.array([[np.sum(xv * xv)]]), (x,), lambda g: (2.0 * g[0, 0] * xv,)
        )

    def log_sum_exp_rows(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Stable per-row ``log(sum(exp(x)))``.

        ``mask`` (same shape, boolean) selects the entries that take part;
        every row needs at least one selected entry.
        """
        if x.shape[1] == 0:
            raise DimensionError("log_sum_exp_rows needs at least one column")
        xv = x.value
        if mask is None:
            m = xv.max(axis=1, keepdims=True)
            e = np.exp(xv - m)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != xv.shape:
                raise DimensionError(f"mask shape {mask.shape} does not match {xv.shape}")
            if not np.all(mask.any(axis=1)):
                raise DimensionError("every row needs at least one unmasked entry")
            m = np.where(mask, xv, -np.inf).max(axis=1, keepdims=True)
            e = np.where(mask, np.exp(np.where(mask, xv - m, 0.0)), 0.0)
        s = e.sum(axis=1, keepdims=True)
        soft = e / s
        return self._emit("log_sum_exp_rows", m + np.log(s), (x,), lambda g: (g * soft,))

    def logaddexp(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"logaddexp shape mismatch: {a.shape} vs {b.shape}")
        out = np.logaddexp(a.value, b.value)
        wa = np.exp(a.value - out)
        wb = np.exp(b.value - out)
        return self._emit("logaddexp", out, (a, b), lambda g: (g * wa, g * wb))

    def softmax_rows(self, x: Tensor) -> Tensor:
        xv = x.value
        e = np.exp(xv - xv.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

        return self._emit("softmax_rows", p, (x,), back)

    def log_clamped(self, x: Tensor, floor: float = 1e-12) -> Tensor:
        """Elementwise log with inputs clamped from below; clamps are counted."""
        xv = x.value
        low = xv < floor
        self.clamp_count += int(low.sum())
        safe = np.where(low, floor, xv)
        return self._emit("log_clamped", np.log(safe), (x,), lambda g: (np.where(low, 0.0, g / safe),))

    def log_sigmoid(self, x: Tensor, clamp: float = 30.0) -> Tensor:
        """``log(1 / (1 + exp(-x)))`` with inputs clipped to ``[-clamp, clamp]``."""
        xv = x.value
        inside = np.abs(xv) <= clamp
        c = np.clip(xv, -clamp, clamp)
        out = -np.logaddexp(0.0, -c)
        sig_neg = 1.0 / (1.0 + np.exp(c))
        return self._emit("log_sigmoid", out, (x,), lambda g: (g * sig_neg * inside,))

    def row_norms(self, x: Tensor) -> Tensor:
        """Euclidean norm of each row as an ``n x 1`` column (zero gradient at 0)."""
        xv = x.value
        nrm = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
        safe = np.where(nrm > 0, nrm, 1.0)
        return self._emit("row_norms", nrm, (x,), lambda g: (g * xv / safe * (nrm > 0),))


def adam_step(p: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update of ``p`` in place.

    The gradient is left untouched; zeroing it is the caller's job.
    """
    g = p.grad
    if g is None:
        raise NumericError(f"parameter {p.name or ''} has no gradient")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter {p.name or '?'} {p.shape}")
    p.step += 1
    p.m *= beta1
    p.m += (1.0 - beta1) * g
    p.v *= beta2
    p.v += (1.0 - beta2) * (g * g)
    m_hat = p.m / (1.0 - beta1**p.step)
    v_hat = p.v / (1.0 - beta2**p.step)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed list of parameters (duplicates are collapsed)."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        seen, unique = set(), []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        self.params = unique
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    x = as_dense(x).copy()
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
