"""Dense matrix arithmetic and a ridge-stabilized least-squares solver.

Matrices are plain 2-D float64 ndarrays and activation batches are 3-D
(N, T, C) float64 ndarrays; the helpers here validate those carriers and
keep every solver path in 64-bit arithmetic.  All functions are pure and
never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

# Relative ridge damping for the normal equations.  Large enough to make
# rank-deficient systems solvable, small enough to be invisible next to
# the 1e-8 recovery tolerances used throughout.
RIDGE_SCALE = 1e-10


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected 2 dimensions, got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: contains non-finite entries")
    return a


def as_batch3(x, name: str = "batch") -> np.ndarray:
    """Validate and return ``x`` as a finite (N, T, C) float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"{name}: expected 3 dimensions (N, T, C), got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: contains non-finite entries")
    return a


def flatten_batch(x) -> np.ndarray:
    """Collapse a (N, T, C) batch to a (N*T, C) matrix.

    Rows are ordered instance-major, token-minor, so results are
    bit-reproducible across runs.
    """
    a = as_batch3(x)
    n, t, c = a.shape
    return np.ascontiguousarray(a).reshape(n * t, c)


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with explicit shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul: product overflowed to non-finite values")
    return out


def least_squares(a, b) -> np.ndarray:
    """Minimize ||a @ X - b||_F via ridge-stabilized normal equations.

    Solves (a.T a + lam*I) X = a.T b with lam = RIDGE_SCALE * mean(diag(a.T a)),
    falling back to an absolute lam = RIDGE_SCALE when that mean is zero.
    The damping makes rank-deficient systems (e.g. calibration batches with
    fewer rows than columns) solvable without any special-casing, at the cost
    of a perturbation orders of magnitude below the tolerances used here.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"least_squares: row counts differ ({a.shape} vs {b.shape})")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"least_squares: degenerate system matrix {a.shape}")

    gram = a.T @ a
    diag_mean = float(np.mean(np.diag(gram)))
    lam = RIDGE_SCALE * diag_mean if diag_mean > 0.0 else RIDGE_SCALE
    gram[np.diag_indices_from(gram)] += lam
    try:
        x = np.linalg.solve(gram, a.T @ b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - ridge keeps gram PD
        raise NumericError(f"least_squares: normal equations not solvable: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise NumericError("least_squares: solution contains non-finite entries")
    return x


def column_means(x) -> np.ndarray:
    """Arithmetic mean of each column, returned as a (1, k) matrix."""
    a = as_matrix(x)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"column_means: empty matrix {a.shape}")
    return a.mean(axis=0, keepdims=True)


def column_variances(x) -> np.ndarray:
    """Population variance (divide by m) of each column as a (1, k) matrix."""
    a = as_matrix(x)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"column_variances: empty matrix {a.shape}")
    return a.var(axis=0, keepdims=True)


def frobenius_sq(x) -> float:
    """Sum of squared entries."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("frobenius_sq: non-finite entries")
    return float(np.sum(a * a))
