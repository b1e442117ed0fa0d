"""Shared fixtures and independent reference computations.

The reference routines below are deliberately naive: dense covariance
algebra through plain ``numpy.linalg`` only, no package factorization
helpers, so a defect in the library cannot leak into expected values.
"""

import numpy as np
import pytest

from milsense import GridConfig, GridDataset, Matern32, Separable, synth_field


def mvn_logpdf_zero_mean(cov: np.ndarray, y: np.ndarray) -> float:
    """Log density of y under N(0, cov), dense and direct."""
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise AssertionError("reference covariance is not positive definite")
    quad = float(y @ np.linalg.solve(cov, y))
    return -0.5 * (y.size * np.log(2.0 * np.pi) + logdet + quad)


def dense_log_marginal(kernel, x, y, sigma2: float) -> float:
    """Exact GP log marginal likelihood on a static input set."""
    cov = kernel.matrix(np.asarray(x, dtype=float)) + sigma2 * np.eye(len(y))
    return mvn_logpdf_zero_mean(cov, np.asarray(y, dtype=float))


def dense_posterior(kernel, x, y, sigma2: float, xstar):
    """Exact GP posterior mean and covariance at new inputs."""
    x = np.asarray(x, dtype=float)
    xstar = np.asarray(xstar, dtype=float)
    y = np.asarray(y, dtype=float)
    kxx = kernel.matrix(x) + sigma2 * np.eye(y.size)
    ksx = kernel.matrix(xstar, x)
    kss = kernel.matrix(xstar)
    solved = np.linalg.solve(kxx, ksx.T)
    return ksx @ np.linalg.solve(kxx, y), kss - ksx @ solved


def dense_st_log_marginal(kernel: Separable, data: GridDataset, sigma2: float) -> float:
    """Exact spatiotemporal log marginal over the observed entries.

    Row order is time-major to match ``values.ravel()``.
    """
    kt = kernel.temporal.matrix(data.times[:, None])
    ks = kernel.spatial.matrix(data.spatial_locations)
    flat = data.mask.ravel()
    big = np.kron(kt, ks)[np.ix_(flat, flat)]
    y = data.values.ravel()[flat]
    return mvn_logpdf_zero_mean(big + sigma2 * np.eye(y.size), y)


def dense_st_sparse_fit(kernel: Separable, data: GridDataset, z, sigma2: float) -> dict:
    """Dense reference for the sparse spatiotemporal model.

    Treats every (inducing location, time step) pair as one inducing
    variable and runs the collapsed variational computation with full
    matrices. Returns the bound, the per-step moments of the inducing
    values, and the predictive field on the data grid.
    """
    z = np.asarray(z, dtype=float)
    n_t, n_s, m_s = data.n_times, data.n_locations, z.shape[0]
    kt = kernel.temporal.matrix(data.times[:, None])
    ks_zz = kernel.spatial.matrix(z)
    ks_xz = kernel.spatial.matrix(data.spatial_locations, z)

    kmm = np.kron(kt, ks_zz)
    m = kmm.shape[0]
    kmm = kmm + (1e-12 * np.trace(kmm) / m) * np.eye(m)
    knm_full = np.kron(kt, ks_xz)
    flat = data.mask.ravel()
    knm = knm_full[flat]
    y = data.values.ravel()[flat]

    kmm_inv_kmn = np.linalg.solve(kmm, knm.T)
    qnn = knm @ kmm_inv_kmn
    prior_diag_full = np.repeat(np.diag(kt), n_s) * np.tile(
        kernel.spatial.diag(data.spatial_locations), n_t
    )
    deficit = float(np.sum(prior_diag_full[flat]) - np.trace(qnn))
    elbo = mvn_logpdf_zero_mean(qnn + sigma2 * np.eye(y.size), y) - 0.5 * deficit / sigma2

    inner = kmm + knm.T @ knm / sigma2
    q_mean = kmm @ np.linalg.solve(inner, knm.T @ y) / sigma2
    q_cov = kmm @ np.linalg.solve(inner, kmm)

    proj = np.linalg.solve(kmm, knm_full.T)           # (m, n_t * n_s)
    pred_mean = (proj.T @ q_mean).reshape(n_t, n_s)
    nystrom_diag = np.sum(knm_full.T * proj, axis=0)
    cov_diag = np.sum(proj * (q_cov @ proj), axis=0)
    pred_var = (prior_diag_full - nystrom_diag + cov_diag).reshape(n_t, n_s)

    u_means = q_mean.reshape(n_t, m_s)
    u_covs = np.empty((n_t, m_s, m_s))
    for j in range(n_t):
        block = slice(j * m_s, (j + 1) * m_s)
        u_covs[j] = q_cov[block, block]
    return {
        "elbo": elbo,
        "u_means": u_means,
        "u_covs": u_covs,
        "pred_mean": pred_mean,
        "pred_var": pred_var,
    }


@pytest.fixture(scope="session")
def small_field() -> GridDataset:
    """12-point grid, 12 steps; compact enough for dense references."""
    config = GridConfig(nx=4, ny=3, n_times=12)
    kernel = Separable(Matern32(1.0, [0.4, 0.4]), Matern32(1.0, [3.0]))
    return synth_field("separable_gp", config, kernel, seed=11, obs_noise=0.1)


@pytest.fixture(scope="session")
def small_kernel() -> Separable:
    return Separable(Matern32(1.0, [0.4, 0.4]), Matern32(1.0, [3.0]))
