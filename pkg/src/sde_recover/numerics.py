"""Dense symmetric-positive-definite linear algebra.

Every matrix inverse in the estimator goes through :func:`factor_spd`, which
adds the smallest diagonal jitter from a ladder that lets a Cholesky
factorization succeed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

# Relative to the mean diagonal of the matrix being factored.
DEFAULT_JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


class NotSymmetricError(ValueError):
    pass


class FactorizationError(np.linalg.LinAlgError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``A + jitter * I``."""

    lower: np.ndarray
    jitter: float

    @property
    def dimension(self) -> int:
        return self.lower.shape[0]

    def solve(self, rhs):
        return solve_spd(self, rhs)

    def inverse(self) -> np.ndarray:
        return solve_spd(self, np.eye(self.dimension))

    def log_det(self) -> float:
        return log_det(self)


def factor_spd(matrix, jitter_ladder: Sequence[float] = DEFAULT_JITTER_LADDER,
               *, relative: bool = True) -> SpdFactor:
    """Cholesky-factor a symmetric matrix, escalating diagonal jitter on failure.

    Parameters
    ----------
    matrix : (n, n) array_like
        Symmetric matrix.
    jitter_ladder : sequence of float
        Candidate jitters, tried in order. With ``relative=True`` each entry is
        multiplied by the mean of the diagonal of ``matrix``.

    Returns
    -------
    SpdFactor
        Factor of ``matrix + j*I`` for the first ladder entry ``j`` that works.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * max(scale, 1.0):
        raise NotSymmetricError("matrix is not symmetric to 1e-10 relative tolerance")
    a = 0.5 * (a + a.T)
    unit = float(np.mean(np.diag(a))) if relative else 1.0
    if not np.isfinite(unit) or unit <= 0.0:
        unit = 1.0
    eye = np.eye(a.shape[0])
    for step in jitter_ladder:
        jitter = float(step) * unit
        try:
            lower = scipy.linalg.cholesky(a + jitter * eye, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError):
            continue
        if np.all(np.diag(lower) > 0.0):
            return SpdFactor(lower=lower, jitter=jitter)
    raise FactorizationError(
        f"Cholesky failed for every jitter in the ladder {tuple(jitter_ladder)} "
        f"(scaled by {unit:.3g})")


def solve_spd(factor: SpdFactor, rhs):
    """Solve ``(A + jI) r = rhs`` given the factor of ``A + jI``."""
    b = np.asarray(rhs, dtype=float)
    if b.shape[:1] != (factor.dimension,):
        raise DimensionMismatchError(
            f"rhs has leading dimension {b.shape[:1]}, factor is {factor.dimension}")
    return scipy.linalg.cho_solve((factor.lower, True), b, check_finite=False)


def log_det(factor: SpdFactor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))
