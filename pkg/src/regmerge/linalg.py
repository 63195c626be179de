"""Dense float64 matrix helpers: products, SPD solves and Gram regularization.

Everything here operates on plain 2-D numpy arrays in float64. Inputs are
validated (finite, dimension-checked) and never mutated; all functions are
pure and safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

SYMMETRY_RTOL = 1e-9

# Jitter ladder for nearly singular Gram sums: start at 1e-8 * trace/dim and
# escalate x10 until 1e-2 * trace/dim before giving up.
JITTER_START_SCALE = 1e-8
JITTER_MAX_SCALE = 1e-2


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NonSymmetricError(ValueError):
    """A matrix required to be symmetric is not, beyond tolerance."""


class SingularSystemError(ValueError):
    """Cholesky failed even after the jitter ladder was exhausted."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, requiring finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SpdSolveReport:
    jitter_applied: float
    condition_estimate: float
    method: str  # "cholesky" or "cholesky_with_jitter"


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    return a @ b


def _check_symmetric(a: np.ndarray) -> None:
    scale = np.abs(a).max()
    if scale == 0.0:
        return
    if np.abs(a - a.T).max() > SYMMETRY_RTOL * scale:
        raise NonSymmetricError("spd_solve: matrix is not symmetric within tolerance")


def spd_solve(a, b) -> tuple[np.ndarray, SpdSolveReport]:
    """Solve a @ X = b for symmetric positive (semi-)definite a via Cholesky.

    If the factorization fails (singular or slightly indefinite input), a
    jitter eps * I is added with eps stepping through the ladder defined
    above; the eps actually used is recorded in the returned report.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"spd_solve: a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeError(f"spd_solve: b has {b.shape[0]} rows, expected {n}")
    _check_symmetric(a)

    unit = np.trace(a) / n
    ladder = [0.0]
    eps = JITTER_START_SCALE * unit
    while eps > 0.0 and eps <= JITTER_MAX_SCALE * unit * (1 + 1e-12):
        ladder.append(eps)
        eps *= 10.0

    for jitter in ladder:
        a_j = a if jitter == 0.0 else a + jitter * np.eye(n)
        try:
            c, low = scipy.linalg.cho_factor(a_j, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        x = scipy.linalg.cho_solve((c, low), b, check_finite=False)
        if not np.all(np.isfinite(x)):
            continue
        report = SpdSolveReport(
            jitter_applied=jitter,
            condition_estimate=float(np.linalg.cond(a_j)),
            method="cholesky" if jitter == 0.0 else "cholesky_with_jitter",
        )
        return x, report
    raise SingularSystemError("spd_solve: jitter ladder exhausted, system is singular")


def scale_offdiagonal(g, alpha: float) -> np.ndarray:
    """Shrink off-diagonal entries: alpha * g + (1 - alpha) * diag(g).

    The diagonal of the result equals the diagonal of g exactly.
    """
    g = as_matrix(g, "g")
    if g.shape[0] != g.shape[1]:
        raise ShapeError(f"scale_offdiagonal: matrix must be square, got {g.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"scale_offdiagonal: alpha must be in [0, 1], got {alpha}")
    out = alpha * g
    np.fill_diagonal(out, np.diag(g))
    return out
