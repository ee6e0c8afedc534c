"""Dense 2-D float64 tensors with a reverse-mode differentiation tape.

A Tensor wraps a (rows, cols) numpy array plus a same-shaped gradient
buffer. Every op that touches a gradient-requiring input records a
backward closure on its output; ``backward()`` replays the closures in
reverse topological order and then frees the tape, so the graph lives
for exactly one forward/backward pass. Arrays held by a Tensor are
treated as frozen: ops allocate fresh outputs and never mutate inputs.

Broadcasting is limited to row vectors (1 x n), column vectors (m x 1)
and scalars (1 x 1) against full matrices; anything else is a ShapeError.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values reached an op that requires finite input."""


class DegenerateVectorWarning(UserWarning):
    """A norm fell below EPS_NORM where a direction was needed."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("values", "_grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got ndim={arr.ndim}")
        self.values = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; allocated (as zeros) on first touch."""
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    # -- shape helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        """Copy of the values, cut off from the tape."""
        return Tensor(self.values.copy())

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return affine(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)

    @property
    def T(self):
        return transpose(self)

    # -- backward ------------------------------------------------------
    def backward(self, free_graph: bool = True):
        """Accumulate d(self)/d(leaf) into every reachable .grad.

        self must be 1x1. With free_graph the tape is cleared afterwards.
        """
        if self.values.size != 1:
            raise ShapeError(f"backward() needs a scalar (1x1) output, got {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if free_graph:
            for node in topo:
                node._parents = ()
                node._backward = None


def record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[], None]):
    """Attach a backward closure to out; the hook for composite modules that
    define ops with hand-derived gradients."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    (ar, ac), (br, bc) = a.shape, b.shape
    if (ar != br and 1 not in (ar, br)) or (ac != bc and 1 not in (ac, bc)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise binary ops ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.values + b.values)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.shape)

    record(out, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.values - b.values)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad, b.shape)

    record(out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_broadcast(a, b, "mul")
    out = Tensor(a.values * b.values)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.values, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.values, b.shape)

    record(out, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = Tensor(a.values / b.values)

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad / b.values, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(out.grad * a.values / (b.values * b.values), b.shape)

    record(out, (a, b), backward)
    return out


def affine(a: Tensor, alpha: float, beta: float) -> Tensor:
    """alpha * a + beta, with python-scalar coefficients."""
    out = Tensor(alpha * a.values + beta)

    def backward():
        if a.requires_grad:
            a.grad += alpha * out.grad

    record(out, (a,), backward)
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; gradient routes to the larger operand (ties to a)."""
    _check_broadcast(a, b, "maximum")
    out = Tensor(np.maximum(a.values, b.values))

    def backward():
        a_wins = a.values >= b.values
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * a_wins, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * ~a_wins, b.shape)

    record(out, (a, b), backward)
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the smaller operand (ties to a)."""
    _check_broadcast(a, b, "minimum")
    out = Tensor(np.minimum(a.values, b.values))

    def backward():
        a_wins = a.values <= b.values
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * a_wins, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * ~a_wins, b.shape)

    record(out, (a, b), backward)
    return out


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip entries into [lo, hi]; gradient passes only where unclipped."""
    out = Tensor(np.clip(a.values, lo, hi))

    def backward():
        if a.requires_grad:
            inside = np.ones(a.shape, dtype=bool)
            if lo is not None:
                inside &= a.values > lo
            if hi is not None:
                inside &= a.values < hi
            a.grad += out.grad * inside

    record(out, (a,), backward)
    return out


# -- elementwise unary ops ------------------------------------------------

def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Stable logistic of a raw array, clipped into the open interval (0, 1)."""
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x))
    return np.clip(y, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function; output is strictly inside (0, 1)."""
    y = sigmoid_values(a.values)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * y * (1.0 - y)

    record(out, (a,), backward)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (1.0 - y * y)

    record(out, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * (a.values > 0)

    record(out, (a,), backward)
    return out


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.values))

    def backward():
        if a.requires_grad:
            a.grad += out.grad * sigmoid_values(a.values)

    record(out, (a,), backward)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * y

    record(out, (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise NumericError("log: non-positive input")
    out = Tensor(np.log(a.values))

    def backward():
        if a.requires_grad:
            a.grad += out.grad / a.values

    record(out, (a,), backward)
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise NumericError("sqrt: negative input")
    y = np.sqrt(a.values)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * 0.5 / np.maximum(y, EPS_NORM)

    record(out, (a,), backward)
    return out


def huber(a: Tensor) -> Tensor:
    """Smooth-l1 of each entry: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    ax = np.abs(a.values)
    small = ax < 1.0
    y = np.where(small, 0.5 * a.values * a.values, ax - 0.5)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * np.clip(a.values, -1.0, 1.0)

    record(out, (a,), backward)
    return out


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def backward():
        if a.requires_grad:
            a.grad += out.grad @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ out.grad

    record(out, (a, b), backward)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T.copy())

    def backward():
        if a.requires_grad:
            a.grad += out.grad.T

    record(out, (a,), backward)
    return out


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over each row, stabilized by subtracting the row max."""
    if not np.all(np.isfinite(a.values)):
        raise NumericError("row_softmax: non-finite input")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward():
        if a.requires_grad:
            g = out.grad
            a.grad += y * (g - (g * y).sum(axis=1, keepdims=True))

    record(out, (a,), backward)
    return out


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor([[a.values.sum()]])
    elif axis in (0, 1):
        out = Tensor(a.values.sum(axis=axis, keepdims=True))
    else:
        raise ShapeError(f"sum: bad axis {axis}")

    def backward():
        if a.requires_grad:
            a.grad += out.grad  # broadcasts back over the reduced axis

    record(out, (a,), backward)
    return out


def tmean(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor([[a.values.mean()]])

    def backward():
        if a.requires_grad:
            a.grad += out.grad / n

    record(out, (a,), backward)
    return out


# -- structural ops -------------------------------------------------------

def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    rows = tensors[0].rows
    for t in tensors:
        if t.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {[t.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=1))

    def backward():
        ofs = 0
        for t in tensors:
            if t.requires_grad:
                t.grad += out.grad[:, ofs:ofs + t.cols]
            ofs += t.cols

    record(out, tuple(tensors), backward)
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    cols = tensors[0].cols
    for t in tensors:
        if t.cols != cols:
            raise ShapeError(f"concat_rows: col counts differ, {[t.shape for t in tensors]}")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=0))

    def backward():
        ofs = 0
        for t in tensors:
            if t.requires_grad:
                t.grad += out.grad[ofs:ofs + t.rows, :]
            ofs += t.rows

    record(out, tuple(tensors), backward)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.rows):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.values[start:stop, :].copy())

    def backward():
        if a.requires_grad:
            a.grad[start:stop, :] += out.grad

    record(out, (a,), backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.cols):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.values[:, start:stop].copy())

    def backward():
        if a.requires_grad:
            a.grad[:, start:stop] += out.grad

    record(out, (a,), backward)
    return out


def embedding_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = list(ids)
    for i in ids:
        if not 0 <= i < table.rows:
            raise ValueError(f"embedding_rows: id {i} outside vocabulary of size {table.rows}")
    idx = np.asarray(ids, dtype=np.intp)
    out = Tensor(table.values[idx, :])

    def backward():
        if table.requires_grad:
            np.add.at(table.grad, idx, out.grad)

    record(out, (table,), backward)
    return out


# -- similarity -----------------------------------------------------------

def cosine_sim(a, b) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Near-zero vectors have no direction; they get similarity 0 and a
    DegenerateVectorWarning instead of an error.
    """
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    if av.shape != bv.shape:
        raise ShapeError(f"cosine_sim: lengths differ, {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na < EPS_NORM or nb < EPS_NORM:
        warnings.warn("cosine_sim: degenerate vector, returning 0", DegenerateVectorWarning)
        return 0.0
    return float(np.clip(av @ bv / (na * nb), -1.0, 1.0))


def cosine_rows(keys: Tensor, mat: np.ndarray) -> Tensor:
    """Cosine similarity of every key row against every row of a constant matrix.

    Output is (keys.rows x mat.rows); differentiable with respect to the
    keys only (mat is captured by value). Degenerate rows on either side
    contribute similarity 0.
    """
    m = np.asarray(mat, dtype=np.float64)
    if keys.cols != m.shape[1]:
        raise ShapeError(f"cosine_rows: width mismatch, keys {keys.shape} vs matrix {m.shape}")
    key_norm = np.linalg.norm(keys.values, axis=1, keepdims=True)
    mat_norm = np.linalg.norm(m, axis=1, keepdims=True)
    key_bad = key_norm < EPS_NORM
    mat_bad = mat_norm < EPS_NORM
    if key_bad.any() or mat_bad.any():
        warnings.warn("cosine_rows: degenerate vector, similarity set to 0",
                      DegenerateVectorWarning)
    safe_key = np.where(key_bad, 1.0, key_norm)
    safe_mat = np.where(mat_bad, 1.0, mat_norm)
    unit_mat = np.where(mat_bad, 0.0, m / safe_mat)
    cos = (keys.values / safe_key) @ unit_mat.T
    cos[key_bad[:, 0], :] = 0.0
    np.clip(cos, -1.0, 1.0, out=cos)
    out = Tensor(cos)

    def backward():
        if keys.requires_grad:
            g = out.grad
            dk = g @ unit_mat / safe_key \
                - keys.values * ((g * cos).sum(axis=1, keepdims=True) / (safe_key * safe_key))
            dk[key_bad[:, 0], :] = 0.0
            keys.grad += dk

    record(out, (keys,), backward)
    return out


# -- gradient verification --------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               h: float = 1e-3) -> float:
    """Compare analytic gradients of a scalar-valued f against central differences.

    f is re-evaluated with each coordinate of each param nudged by +/- h;
    the returned figure is the max over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"grad_check: step h={h} outside [1e-5, 1e-2]")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.values).all():
        raise NumericError("grad_check: f returned non-finite value")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.values.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError("grad_check: f returned non-finite value")
                numeric = (f_plus - f_minus) / (2.0 * h)
                ai = a.ravel()[i]
                rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
                worst = max(worst, rel)
    for p in params:
        p.zero_grad()
    return worst
