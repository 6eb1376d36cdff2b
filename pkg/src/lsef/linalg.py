"""Singular values via one-sided Jacobi orthogonalisation.

Dependency-free and adequate for the parameter-tensor sizes seen here. The
iteration works on whichever orientation has fewer columns (the smaller Gram
dimension), rotating column pairs until all normalised off-diagonal Gram
entries fall below tolerance.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericalError

MAX_SWEEPS = 100
OFFDIAG_TOL = 1e-10


def matricize(array):
    """Flatten a k-way tensor to first-axis x rest (convolution convention)."""
    arr = np.asarray(array)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    return arr.reshape(arr.shape[0], -1)


def svd_values(matrix, max_sweeps=MAX_SWEEPS, tol=OFFDIAG_TOL):
    """Non-increasing singular values of a real matrix.

    Raises NumericalError with sweep diagnostics if the rotations do not
    converge within `max_sweeps`.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd_values expects a matrix, got shape {a.shape}")
    if a.size == 0:
        raise DimensionError("svd_values expects a non-empty matrix")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd_values requires finite entries")
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    n = a.shape[1]

    worst = 0.0
    for _ in range(max_sweeps):
        worst = 0.0
        # Columns annihilated to rounding noise count as converged, otherwise
        # the relative criterion cycles on rank-deficient inputs.
        floor = (a * a).sum(axis=0).max() * 1e-28
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                if app <= floor or aqq <= floor:
                    continue
                apq = a[:, p] @ a[:, q]
                ratio = abs(apq) / np.sqrt(app * aqq)
                worst = max(worst, ratio)
                if ratio <= tol:
                    continue
                tau = (aqq - app) / (2.0 * apq)
                # sign(0) must act as +1 or equal-norm parallel columns never rotate
                t = (1.0 if tau >= 0.0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = a[:, p].copy()
                a[:, p] = c * col_p - s * a[:, q]
                a[:, q] = s * col_p + c * a[:, q]
        if worst <= tol:
            values = np.sqrt((a * a).sum(axis=0))
            values.sort()
            return [float(v) for v in values[::-1]]
    raise NumericalError(
        f"one-sided Jacobi did not converge in {max_sweeps} sweeps "
        f"(worst normalised off-diagonal {worst:.3e}, shape {matrix.shape})"
    )
