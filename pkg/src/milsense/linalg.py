"""Dense linear-algebra helpers with a uniform jitter policy.

Every covariance inversion in the package goes through a Cholesky
factorization obtained here. Failed factorizations retry with jitter
``1e-10 * trace`` escalating tenfold up to ``1e-6 * trace``; past that
the matrix is treated as numerically indefinite and a
:class:`~milsense.errors.NumericalError` is raised.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError

JITTER_INITIAL_FRACTION = 1e-10
JITTER_MAX_FRACTION = 1e-6
JITTER_GROWTH = 10.0


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def chol_psd(a: np.ndarray, *, what: str = "covariance") -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a nominally-PSD matrix.

    Returns ``(L, jitter)`` where ``jitter`` is the diagonal offset that
    was required (0.0 when the plain factorization succeeds).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericalError(f"{what} is not square: shape {a.shape}")
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    trace = float(np.trace(a))
    scale = trace if trace > 0.0 else 1.0
    jitter = JITTER_INITIAL_FRACTION * scale
    eye = np.eye(a.shape[0])
    while jitter <= JITTER_MAX_FRACTION * scale * (1.0 + 1e-12):
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= JITTER_GROWTH
    raise NumericalError(
        f"{what} is not positive definite within the jitter policy "
        f"(trace={trace:.3e}, max jitter={JITTER_MAX_FRACTION * scale:.3e})"
    )


def chol_solve(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve((chol_lower, True), b)


def solve_psd(a: np.ndarray, b: np.ndarray, *, what: str = "covariance") -> np.ndarray:
    chol_lower, _ = chol_psd(a, what=what)
    return chol_solve(chol_lower, b)


def solve_lower(chol_lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    return scipy.linalg.solve_triangular(chol_lower, b, lower=True)


def logdet_from_chol(chol_lower: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol_lower))))


def gaussian_logpdf(resid: np.ndarray, cov: np.ndarray, *, what: str = "covariance") -> float:
    """log N(resid; 0, cov) for a dense covariance."""
    resid = np.asarray(resid, dtype=float).reshape(-1)
    chol_lower, _ = chol_psd(cov, what=what)
    alpha = solve_lower(chol_lower, resid)
    k = resid.size
    return -0.5 * (k * np.log(2.0 * np.pi) + logdet_from_chol(chol_lower) + float(alpha @ alpha))


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clipped to zero."""
    a = symmetrize(np.asarray(a, dtype=float))
    if not np.any(a):
        return np.zeros_like(a)
    eigvals, eigvecs = np.linalg.eigh(a)
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None)) @ eigvecs.T
