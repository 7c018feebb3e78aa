"""Minimal dense linear algebra, activations, and finite-difference utilities.

All public operations work on 64-bit float numpy arrays: vectors are 1-D,
matrices 2-D row-major.  Everything here is a pure function; values are never
mutated, so they are safe to share across threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Vec = np.ndarray  # 1-D float64
Mat = np.ndarray  # 2-D float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a contract is violated because a value went NaN/Inf."""


def as_vec(x) -> Vec:
    """Coerce to a 1-D float64 array, rejecting anything else."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    return v


def as_mat(x) -> Mat:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    return m


def matvec(M, x) -> Vec:
    """Matrix-vector product M @ x."""
    M, x = as_mat(M), as_vec(x)
    if M.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: matrix is {M.shape}, vector has dim {x.shape[0]}")
    return M @ x


def dot(x, y) -> float:
    x, y = as_vec(x), as_vec(y)
    if x.shape != y.shape:
        raise DimensionError(f"dot: dims {x.shape[0]} vs {y.shape[0]}")
    return float(x @ y)


def outer(z, u) -> Mat:
    """Outer product: result[i, j] = z[i] * u[j]."""
    return np.outer(as_vec(z), as_vec(u))


def softmax(s) -> Vec:
    """Numerically stabilized softmax (max-subtraction)."""
    s = as_vec(s)
    if s.size == 0:
        raise DimensionError("softmax of an empty vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def sigmoid(x):
    """Stable logistic function; accepts a scalar or an array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def argmax_first(x) -> int:
    """Index of the maximum value; exact ties break to the lowest index."""
    x = as_vec(x)
    if x.size == 0:
        raise DimensionError("argmax of an empty vector")
    return int(np.argmax(x))


def central_fd_gradient(f: Callable[[Vec], float], x0, h: float) -> Vec:
    """Central finite-difference gradient of a scalar function.

    Component j is (f(x0 + h*e_j) - f(x0 - h*e_j)) / (2h).  Rejects with the
    offending index if f evaluates to a non-finite value.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x0 = as_vec(x0)
    grad = np.empty_like(x0)
    x = x0.copy()
    for j in range(x0.size):
        x[j] = x0[j] + h
        fp = float(f(x))
        x[j] = x0[j] - h
        fm = float(f(x))
        x[j] = x0[j]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while perturbing index {j}")
        grad[j] = (fp - fm) / (2.0 * h)
    return grad


def check_finite(x, what: str = "value"):
    """Assert all entries are finite; used at construction boundaries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


def flatten_params(arrays: Sequence[np.ndarray]) -> Vec:
    """Concatenate a sequence of arrays into one flat parameter vector."""
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
