"""Collapsed sparse variational GP regression with Gaussian noise.

Implements the standard collapsed evidence lower bound

    L = log N(Y | 0, Q_NN + s2 I) - 1/(2 s2) tr(K_NN - Q_NN),
    Q_NN = K_NM K_MM^{-1} K_MN,

its optimal variational moments, the sparse predictive, and the exact
quadratic expansion of the bound under an additive data perturbation.
All routes factor K_MM once and work through triangular solves; the full
N x N covariance is never formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import InputError
from .kernels import Kernel, kernel_matrix

__all__ = [
    "InducingSet",
    "VariationalMoments",
    "nystrom",
    "collapsed_elbo",
    "optimal_q",
    "predict",
    "elbo_perturbation",
]

DEFAULT_MIN_SEPARATION = 1e-6
VARIANCE_CLAMP_WARN = -1e-8


@dataclass(frozen=True)
class InducingSet:
    """Inducing locations with an optional fixed/free split.

    ``fixed`` marks locations that a design optimizer must not move.
    Construction rejects duplicate locations closer than ``min_separation``.
    """

    locations: np.ndarray
    fixed: np.ndarray | None = None
    min_separation: float = DEFAULT_MIN_SEPARATION

    def __post_init__(self):
        z = np.asarray(self.locations, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] == 0:
            raise InputError(f"inducing locations must be a non-empty 2-D array, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise InputError("inducing locations contain non-finite values")
        object.__setattr__(self, "locations", z)
        fixed = self.fixed
        fixed = np.zeros(z.shape[0], dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
        if fixed.shape != (z.shape[0],):
            raise InputError(f"fixed mask shape {fixed.shape} does not match {z.shape[0]} locations")
        object.__setattr__(self, "fixed", fixed)
        if z.shape[0] > 1:
            diff = z[:, None, :] - z[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            dist[np.diag_indices_from(dist)] = np.inf
            closest = float(dist.min())
            if closest < self.min_separation:
                raise InputError(
                    f"inducing locations closer than min separation "
                    f"({closest:.3e} < {self.min_separation:.3e})"
                )

    def __len__(self) -> int:
        return self.locations.shape[0]


@dataclass(frozen=True)
class VariationalMoments:
    """Mean and covariance of the variational distribution over inducing values."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise InputError(f"moment shapes disagree: mean {mean.shape}, cov {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", linalg.symmetrize(cov))


def _locations(z) -> np.ndarray:
    return z.locations if isinstance(z, InducingSet) else np.asarray(z, dtype=float)


def _check_sigma2(sigma2: float) -> float:
    sigma2 = float(sigma2)
    if not np.isfinite(sigma2) or sigma2 <= 0.0:
        raise InputError(f"noise variance must be positive and finite, got {sigma2}")
    return sigma2


def _check_xy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = x.shape[0] if x.ndim > 0 else 0
    if n == 0:
        raise InputError("empty training set")
    if y.shape != (n,):
        raise InputError(f"targets shape {y.shape} does not match {n} inputs")
    if not np.all(np.isfinite(y)):
        raise InputError("targets contain non-finite values")
    return x, y


def nystrom(kernel: Kernel, x: np.ndarray, z) -> np.ndarray:
    """Low-rank surrogate K_NM K_MM^{-1} K_MN, symmetrized."""
    zloc = _locations(z)
    kmm = kernel_matrix(kernel, zloc)
    kmn = kernel_matrix(kernel, zloc, x)
    lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
    v = linalg.solve_lower(lm, kmn)
    return linalg.symmetrize(v.T @ v)


@dataclass(frozen=True)
class _CollapsedTerms:
    """Shared factorizations behind the bound and the moments."""

    lm: np.ndarray          # chol(K_MM)
    v: np.ndarray           # lm^{-1} K_MN
    lb: np.ndarray          # chol(I + V V' / s2)
    kdiag_sum: float
    qdiag_sum: float

    @property
    def trace_deficit(self) -> float:
        return self.kdiag_sum - self.qdiag_sum


def _factor(kernel: Kernel, x: np.ndarray, z, sigma2: float) -> _CollapsedTerms:
    zloc = _locations(z)
    kmm = kernel_matrix(kernel, zloc)
    kmn = kernel_matrix(kernel, zloc, x)
    lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
    v = linalg.solve_lower(lm, kmn)
    m = v.shape[0]
    b = np.eye(m) + v @ v.T / sigma2
    lb, _ = linalg.chol_psd(b, what="collapsed inner matrix")
    kdiag_sum = float(np.sum(kernel.diag(x)))
    qdiag_sum = float(np.sum(v * v))
    return _CollapsedTerms(lm, v, lb, kdiag_sum, qdiag_sum)


def collapsed_elbo(kernel: Kernel, x: np.ndarray, y: np.ndarray, z, sigma2: float) -> float:
    """Collapsed bound on the log marginal likelihood.

    Equals the exact Gaussian log marginal when the inducing set matches
    the training inputs, and never exceeds it.
    """
    sigma2 = _check_sigma2(sigma2)
    x, y = _check_xy(x, y)
    n = y.size
    terms = _factor(kernel, x, z, sigma2)
    vy = terms.v @ y
    c = linalg.solve_lower(terms.lb, vy) / sigma2
    logdet = n * np.log(sigma2) + linalg.logdet_from_chol(terms.lb)
    quad = float(y @ y) / sigma2 - float(c @ c)
    fit = -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)
    return fit - 0.5 * terms.trace_deficit / sigma2


def optimal_q(
    kernel: Kernel,
    x: np.ndarray,
    y: np.ndarray,
    z,
    sigma2: float,
    *,
    regularize_noise: bool = True,
) -> VariationalMoments:
    """Optimal variational moments over the inducing values.

    mean = K_MM (s2 K_MM + K_MN K_NM)^{-1} K_MN y
    cov  = K_MM (K_MM + K_MN K_NM / s2)^{-1} K_MM

    With ``regularize_noise`` the working noise variance is the supplied
    value plus ``tr(K_NN - Q_NN) / N``, damping the moments when the
    inducing set represents the data poorly. Disable it to recover the
    plain collapsed-bound moments exactly (the sparse predictive built
    from those reproduces the collapsed-bound predictive).
    """
    sigma2 = _check_sigma2(sigma2)
    x, y = _check_xy(x, y)
    zloc = _locations(z)
    kmm = kernel_matrix(kernel, zloc)
    kmn = kernel_matrix(kernel, zloc, x)
    if regularize_noise:
        lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
        v = linalg.solve_lower(lm, kmn)
        deficit = float(np.sum(kernel.diag(x))) - float(np.sum(v * v))
        sigma2 = sigma2 + max(0.0, deficit) / y.size
    inner = linalg.symmetrize(kmm + kmn @ kmn.T / sigma2)
    li, _ = linalg.chol_psd(inner, what="collapsed inner matrix")
    mean = kmm @ linalg.chol_solve(li, kmn @ y) / sigma2
    cov = kmm @ linalg.chol_solve(li, kmm)
    return VariationalMoments(mean, cov)


def _clamp_variance(var: np.ndarray, context: str) -> np.ndarray:
    worst = float(var.min(initial=0.0))
    if worst < VARIANCE_CLAMP_WARN:
        warnings.warn(
            f"{context}: clamping predictive variance of {worst:.3e} to zero",
            RuntimeWarning,
            stacklevel=3,
        )
    return np.clip(var, 0.0, None)


def predict(
    kernel: Kernel, z, moments: VariationalMoments, xstar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sparse predictive mean and marginal variance at new inputs.

    mean = K_*M K_MM^{-1} mu
    var  = diag(K_**) - diag(K_*M K_MM^{-1} K_M*)
           + diag(K_*M K_MM^{-1} A K_MM^{-1} K_M*)
    """
    zloc = _locations(z)
    if moments.mean.size != zloc.shape[0]:
        raise InputError(
            f"moments cover {moments.mean.size} inducing values, set has {zloc.shape[0]}"
        )
    kmm = kernel_matrix(kernel, zloc)
    kms = kernel_matrix(kernel, zloc, xstar)
    lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
    w = linalg.chol_solve(lm, kms)                       # K_MM^{-1} K_M*
    mean = w.T @ moments.mean
    var = (
        kernel.diag(xstar)
        - np.sum(kms * w, axis=0)
        + np.sum(w * (moments.cov @ w), axis=0)
    )
    return mean, _clamp_variance(var, "sparse predictive")


def elbo_perturbation(
    kernel: Kernel,
    x: np.ndarray,
    y: np.ndarray,
    delta: np.ndarray,
    z,
    sigma2: float,
) -> tuple[float, float, float]:
    """Exact change of the collapsed bound under ``y -> y + delta``.

    Only the data-fit quadratic D(Y) = Y' (Q_NN + s2 I)^{-1} Y / 2 moves,
    so the bound drops by grad(D)' delta + D(delta) with
    grad(D) = (Q_NN + s2 I)^{-1} Y. Returns ``(total, linear, quadratic)``
    where ``total = collapsed_elbo(Y) - collapsed_elbo(Y + delta)``.
    """
    sigma2 = _check_sigma2(sigma2)
    x, y = _check_xy(x, y)
    delta = np.asarray(delta, dtype=float).reshape(-1)
    if delta.shape != y.shape:
        raise InputError(f"perturbation shape {delta.shape} does not match targets {y.shape}")
    terms = _factor(kernel, x, z, sigma2)

    def apply_inverse(vec: np.ndarray) -> np.ndarray:
        # Woodbury: (s2 I + V'V)^{-1} = (I - V' B^{-1} V / s2) / s2
        inner = linalg.chol_solve(terms.lb, terms.v @ vec)
        return (vec - terms.v.T @ inner / sigma2) / sigma2

    grad = apply_inverse(y)
    linear = float(grad @ delta)
    quadratic = 0.5 * float(delta @ apply_inverse(delta))
    return linear + quadratic, linear, quadratic
