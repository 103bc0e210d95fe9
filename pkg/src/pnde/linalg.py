"""Small dense symmetric-positive-definite solve helpers.

All routines accept either a single matrix/vector or a stack with leading
batch axes; the matrix order m is assumed small (constraint counts, mass
matrices), so the triangular solves loop over m with vectorized batch math.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, SingularMatrixError


def _find_bad_pivot(a: np.ndarray, floor: float) -> tuple[int, float]:
    """Run the textbook Cholesky recursion until a pivot falls at/below floor."""
    m = a.shape[0]
    w = np.array(a, dtype=np.float64)
    for j in range(m):
        d = w[j, j]
        if d <= floor:
            return j, float(d)
        ljj = np.sqrt(d)
        w[j + 1 :, j] /= ljj
        w[j + 1 :, j + 1 :] -= np.outer(w[j + 1 :, j], w[j + 1 :, j])
    # np.linalg.cholesky disagreed with the recursion; report the smallest pivot
    j = int(np.argmin(np.diagonal(w)))
    return j, float(w[j, j])


def cholesky_factor(a: np.ndarray, rel_pivot_floor: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix (or stack of matrices).

    Raises SingularMatrixError carrying the failing pivot index when a pivot
    is nonpositive, or when it falls below ``rel_pivot_floor * trace(a)``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expected square matrix, got shape {a.shape}")
    floor = 0.0
    if rel_pivot_floor > 0.0:
        trace = np.trace(a, axis1=-2, axis2=-1)
        floor = rel_pivot_floor * float(np.max(trace)) if a.ndim > 2 else rel_pivot_floor * float(trace)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        flat = a.reshape(-1, a.shape[-1], a.shape[-1])
        for row in flat:
            try:
                np.linalg.cholesky(row)
            except np.linalg.LinAlgError:
                j, d = _find_bad_pivot(row, 0.0)
                raise SingularMatrixError(
                    f"matrix is not positive definite: pivot {j} = {d:.3e}", j, d
                ) from None
        raise
    if floor > 0.0:
        pivots = np.diagonal(chol, axis1=-2, axis2=-1) ** 2
        if np.min(pivots) <= floor:
            flat = pivots.reshape(-1, a.shape[-1])
            row = int(np.argmin(np.min(flat, axis=1)))
            j = int(np.argmin(flat[row]))
            d = float(flat[row, j])
            raise SingularMatrixError(
                f"rank-deficient matrix: pivot {j} = {d:.3e} below floor {floor:.3e}",
                j,
                d,
            )
    return chol


def solve_lower_triangular(lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve lo @ x = b for lower-triangular lo; b is (..., m) or (..., m, k)."""
    m = lo.shape[-1]
    vec = b.ndim == lo.ndim - 1
    x = np.array(b[..., None] if vec else b, dtype=np.float64)
    for i in range(m):
        if i:
            x[..., i, :] -= np.einsum("...j,...jk->...k", lo[..., i, :i], x[..., :i, :])
        x[..., i, :] /= lo[..., i, i, None]
    return x[..., 0] if vec else x


def solve_upper_triangular(up: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve up @ x = b for upper-triangular up."""
    m = up.shape[-1]
    vec = b.ndim == up.ndim - 1
    x = np.array(b[..., None] if vec else b, dtype=np.float64)
    for i in range(m - 1, -1, -1):
        if i < m - 1:
            x[..., i, :] -= np.einsum(
                "...j,...jk->...k", up[..., i, i + 1 :], x[..., i + 1 :, :]
            )
        x[..., i, :] /= up[..., i, i, None]
    return x[..., 0] if vec else x


def cholesky_solve_factored(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given the lower Cholesky factor of A."""
    y = solve_lower_triangular(chol, b)
    return solve_upper_triangular(np.swapaxes(chol, -1, -2), y)


def solve_spd(a: np.ndarray, b: np.ndarray, rel_pivot_floor: float = 0.0) -> np.ndarray:
    """Solve A x = b for SPD A via Cholesky."""
    return cholesky_solve_factored(cholesky_factor(a, rel_pivot_floor), b)
