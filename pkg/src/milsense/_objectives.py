"""Differentiable design objectives and the shared ascent loop.

The collapsed spatiotemporal bound is re-expressed here as a JAX
computational graph (an information-form Kalman recursion over the
inducing chain) so that one reverse-mode sweep yields gradients with
respect to inducing locations and log-hyperparameters. The numpy
implementation in :mod:`milsense.stsvgp` stays the reference; agreement
between the two routes is part of the test suite, and a central
finite-difference fallback is always available for kernels the graph
does not cover and for consistency checks.

Everything here works in normalized coordinates and on log-scale
hyperparameters; callers own the mapping to raw units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.linalg import block_diag as jblock_diag
from jax.scipy.linalg import cho_solve as jcho_solve
from jax.scipy.linalg import expm as jexpm

from .errors import InputError, OptimizationError, UnsupportedKernelError
from .kernels import (
    Kernel,
    Matern12,
    Matern32,
    Matern52,
    QuasiPeriodicMatern32,
    Separable,
    Sum,
)

CHAIN_JITTER = 1e-10  # fraction of mean diagonal, matches the first policy rung

__all__ = [
    "OptimizerConfig",
    "build_elbo_objective",
    "build_mes_objective",
    "build_imse_objective",
    "finite_diff_grad",
    "maximize",
    "supports_kernel",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the first-order ascent shared by the design strategies."""

    max_iters: int = 500
    lr_init: float = 0.05
    lr_final: float = 0.001
    restarts: int = 3
    fd_step: float = 1e-4
    tol: float = 1e-7
    patience: int = 40
    seed: int = 0
    min_separation: float = 1e-6
    separation_weight: float = 1e6
    fit_hyperparameters: bool = True
    check_gradient: bool = False
    refit_after_snap: bool = False

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 1:
            raise InputError("optimizer needs max_iters >= 1 and restarts >= 1")
        if self.lr_init <= 0.0 or self.lr_final <= 0.0 or self.fd_step <= 0.0:
            raise InputError("learning rates and fd_step must be positive")
        if self.min_separation < 0.0:
            raise InputError("min_separation must be non-negative")


# -- kernel graph builders --


def _safe_dist(a, b, lengthscales):
    diff = (a[:, None, :] - b[None, :, :]) / lengthscales
    r2 = jnp.sum(diff * diff, axis=-1)
    positive = r2 > 0.0
    return jnp.where(positive, jnp.sqrt(jnp.where(positive, r2, 1.0)), 0.0)


_PROFILES = {
    Matern12: lambda r: jnp.exp(-r),
    Matern32: lambda r: (1.0 + math.sqrt(3.0) * r) * jnp.exp(-math.sqrt(3.0) * r),
    Matern52: lambda r: (1.0 + math.sqrt(5.0) * r + 5.0 / 3.0 * r * r)
    * jnp.exp(-math.sqrt(5.0) * r),
}


def _spatial_builder(kernel: Kernel):
    """Returns (n_params, cross_fn) with cross_fn(params, a, b) -> matrix."""
    profile = _PROFILES.get(type(kernel))
    if profile is None:
        raise UnsupportedKernelError(
            f"no differentiable graph for spatial kernel {type(kernel).__name__}"
        )
    dim = kernel.input_dim

    def cross(params, a, b):
        variance = jnp.exp(params[0])
        lengthscales = jnp.exp(params[1 : 1 + dim])
        return variance * profile(_safe_dist(a, b, lengthscales))

    return 1 + dim, cross


def _temporal_leaf(kernel: Kernel):
    """Returns (n_params, state_dim, fn) with fn(params) -> (F, Pinf, h, kappa0)."""
    if isinstance(kernel, Matern12):

        def build(params):
            variance, ell = jnp.exp(params[0]), jnp.exp(params[1])
            f = jnp.array([[-1.0]]) / ell
            pinf = variance.reshape(1, 1)
            return f, pinf, jnp.array([1.0]), variance

        return 2, 1, build
    if isinstance(kernel, Matern32) and not isinstance(kernel, QuasiPeriodicMatern32):

        def build(params):
            variance, ell = jnp.exp(params[0]), jnp.exp(params[1])
            lam = math.sqrt(3.0) / ell
            f = jnp.array([[0.0, 1.0], [0.0, 0.0]]) + jnp.array(
                [[0.0, 0.0], [-1.0, 0.0]]
            ) * lam**2 + jnp.array([[0.0, 0.0], [0.0, -2.0]]) * lam
            pinf = jnp.diag(jnp.stack([variance, lam**2 * variance]))
            return f, pinf, jnp.array([1.0, 0.0]), variance

        return 2, 2, build
    if isinstance(kernel, Matern52):

        def build(params):
            variance, ell = jnp.exp(params[0]), jnp.exp(params[1])
            lam = math.sqrt(5.0) / ell
            f = (
                jnp.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
                + jnp.array([[0.0] * 3, [0.0] * 3, [-1.0, 0.0, 0.0]]) * lam**3
                + jnp.array([[0.0] * 3, [0.0] * 3, [0.0, -3.0, 0.0]]) * lam**2
                + jnp.array([[0.0] * 3, [0.0] * 3, [0.0, 0.0, -3.0]]) * lam
            )
            kappa = 5.0 / 3.0 * variance / (ell * ell)
            row0 = jnp.stack([variance, jnp.zeros(()), -kappa])
            row1 = jnp.stack([jnp.zeros(()), kappa, jnp.zeros(())])
            row2 = jnp.stack([-kappa, jnp.zeros(()), 25.0 * variance / ell**4])
            pinf = jnp.stack([row0, row1, row2])
            return f, pinf, jnp.array([1.0, 0.0, 0.0]), variance

        return 2, 3, build
    if isinstance(kernel, QuasiPeriodicMatern32):
        omega = 2.0 * math.pi / kernel.period
        rotation = jnp.array([[0.0, -omega], [omega, 0.0]])

        def build(params):
            variance, ell = jnp.exp(params[0]), jnp.exp(params[1])
            lam = math.sqrt(3.0) / ell
            f_base = jnp.array([[0.0, 1.0], [0.0, 0.0]]) + jnp.array(
                [[0.0, 0.0], [-1.0, 0.0]]
            ) * lam**2 + jnp.array([[0.0, 0.0], [0.0, -2.0]]) * lam
            pinf_base = jnp.diag(jnp.stack([variance, lam**2 * variance]))
            f = jnp.kron(f_base, jnp.eye(2)) + jnp.kron(jnp.eye(2), rotation)
            pinf = jnp.kron(pinf_base, jnp.eye(2))
            return f, pinf, jnp.array([1.0, 0.0, 0.0, 0.0]), variance

        return 2, 4, build
    raise UnsupportedKernelError(
        f"no differentiable graph for temporal kernel {type(kernel).__name__}"
    )


def _temporal_builder(kernel: Kernel):
    """Returns (n_params, state_dim, fn) with fn(params) -> (F, Pinf, h, kappa0)."""
    if isinstance(kernel, Sum):
        parts = [_temporal_leaf(child) for child in kernel.children]

        def build(params):
            blocks, offset = [], 0
            for n, _, fn in parts:
                blocks.append(fn(params[offset : offset + n]))
                offset += n
            f = jblock_diag(*[b[0] for b in blocks])
            pinf = jblock_diag(*[b[1] for b in blocks])
            h = jnp.concatenate([b[2] for b in blocks])
            kappa0 = sum(b[3] for b in blocks)
            return f, pinf, h, kappa0

        return sum(p[0] for p in parts), sum(p[1] for p in parts), build
    return _temporal_leaf(kernel)


def supports_kernel(kernel: Kernel) -> bool:
    """True when the differentiable graph covers this separable kernel."""
    if not isinstance(kernel, Separable):
        return False
    try:
        _spatial_builder(kernel.spatial)
        _temporal_builder(kernel.temporal)
    except UnsupportedKernelError:
        return False
    return True


def _jittered(mat):
    n = mat.shape[0]
    return mat + (CHAIN_JITTER * jnp.trace(mat) / n) * jnp.eye(n)


def _separation_penalty(locations, min_separation, weight):
    if locations.shape[0] < 2 or min_separation <= 0.0:
        return 0.0
    dist = _safe_dist(locations, locations, jnp.ones(locations.shape[1]))
    dist = dist + 2.0 * min_separation * jnp.eye(locations.shape[0])
    gap = jnp.clip(min_separation - dist, 0.0, None)
    return weight * 0.5 * jnp.sum(gap * gap)


@dataclass(frozen=True)
class Objective:
    """Compiled objective with packing metadata.

    ``theta`` is ``[free location coords..., log s2, kernel log params...]``
    with the hyperparameter block present only when it is being fitted.
    """

    value: callable
    value_and_grad: callable
    n_free: int
    fit_hyperparameters: bool
    kernel: Separable
    sigma2: float

    @property
    def n_loc_params(self) -> int:
        return 2 * self.n_free

    def initial_theta(self, free_locations: np.ndarray) -> np.ndarray:
        loc = np.asarray(free_locations, dtype=float).reshape(-1)
        if loc.size != self.n_loc_params:
            raise InputError(f"expected {self.n_free} free locations, got {loc.size // 2}")
        if not self.fit_hyperparameters:
            return loc
        hyp = np.concatenate([[math.log(self.sigma2)], self.kernel.log_params()])
        return np.concatenate([loc, hyp])

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, float, Separable]:
        theta = np.asarray(theta, dtype=float)
        free = theta[: self.n_loc_params].reshape(self.n_free, 2).copy()
        if not self.fit_hyperparameters:
            return free, self.sigma2, self.kernel
        sigma2 = float(np.exp(theta[self.n_loc_params]))
        kernel = self.kernel.with_log_params(theta[self.n_loc_params + 1 :])
        return free, sigma2, kernel


def build_elbo_objective(
    kernel: Separable,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    dt: float,
    fixed_locations: np.ndarray,
    n_free: int,
    sigma2: float,
    *,
    fit_hyperparameters: bool = True,
    min_separation: float = 1e-6,
    separation_weight: float = 1e6,
) -> Objective:
    """Collapsed spatiotemporal bound as a function of the packed vector.

    The value is the bound minus a quadratic penalty on inducing pairs
    closer than ``min_separation``. The recursion is the information
    form of the Kalman filter over the inducing chain, so the whole
    graph is reverse-mode differentiable.
    """
    if not isinstance(kernel, Separable):
        raise InputError("design objectives need a Separable kernel")
    spat_n, spat_fn = _spatial_builder(kernel.spatial)
    temp_n, state_d, temp_fn = _temporal_builder(kernel.temporal)

    x = jnp.asarray(x, dtype=jnp.float64)
    y_arr = np.asarray(y, dtype=float)
    mask_arr = np.asarray(mask, dtype=bool)
    weights = jnp.asarray(mask_arr.astype(float))
    y_clean = jnp.asarray(np.where(mask_arr, y_arr, 0.0))
    fixed = jnp.asarray(np.asarray(fixed_locations, dtype=float).reshape(-1, x.shape[1]))
    n_fixed = int(fixed.shape[0])
    n_steps = int(y_arr.shape[0])
    obs_per_location = jnp.sum(weights, axis=0)
    hyper_const = jnp.concatenate(
        [jnp.array([math.log(sigma2)]), jnp.asarray(kernel.log_params())]
    )

    def raw(theta):
        free = theta[: 2 * n_free].reshape(n_free, x.shape[1])
        z = jnp.concatenate([fixed, free], axis=0) if n_fixed else free
        hyp = theta[2 * n_free :] if fit_hyperparameters else hyper_const
        s2 = jnp.exp(hyp[0])
        p_spat = hyp[1 : 1 + spat_n]
        p_temp = hyp[1 + spat_n :]

        kzz = _jittered(spat_fn(p_spat, z, z))
        lzz = jnp.linalg.cholesky(kzz)
        kxz = spat_fn(p_spat, x, z)
        projector = jcho_solve((lzz, True), kxz.T).T           # B, (Ns, M)

        f_mat, pinf_t, h, kappa0 = temp_fn(p_temp)
        a_t = jexpm(f_mat * dt)
        q_t = pinf_t - a_t @ pinf_t @ a_t.T
        m_total = z.shape[0]
        a_full = jnp.kron(jnp.eye(m_total), a_t)
        q_full = jnp.kron(kzz, 0.5 * (q_t + q_t.T))
        p0 = jnp.kron(kzz, pinf_t)
        sdim = m_total * state_d

        emit = (projector[:, :, None] * h[None, None, :]).reshape(-1, sdim)

        # Per-step sufficient statistics; the recursion never touches
        # the observation dimension again.
        emit_w = emit[:, None, :] * weights.T[:, :, None]       # (Ns, T, sdim)
        ctwc = jnp.einsum("nd,nte->tde", emit, emit_w)
        ctwy = jnp.einsum("nd,tn->td", emit, y_clean * weights)
        yy = jnp.sum(y_clean * y_clean * weights, axis=1)
        nobs = jnp.sum(weights, axis=1)
        eye_s = jnp.eye(sdim)

        def assimilate(mean_pred, cov_pred, stats):
            ctwc_t, ctwy_t, yy_t, nobs_t = stats
            lp = jnp.linalg.cholesky(0.5 * (cov_pred + cov_pred.T))
            pinv = jcho_solve((lp, True), eye_s)
            info = 0.5 * ((pinv + pinv.T)) + ctwc_t / s2
            lg = jnp.linalg.cholesky(0.5 * (info + info.T))
            cwr = ctwy_t - ctwc_t @ mean_pred
            u = jcho_solve((lg, True), cwr)
            rwr = yy_t - 2.0 * ctwy_t @ mean_pred + mean_pred @ (ctwc_t @ mean_pred)
            logdet_s = (
                nobs_t * jnp.log(s2)
                + 2.0 * jnp.sum(jnp.log(jnp.diag(lg)))
                + 2.0 * jnp.sum(jnp.log(jnp.diag(lp)))
            )
            quad = (rwr - cwr @ u / s2) / s2
            loglik = -0.5 * (nobs_t * jnp.log(2.0 * jnp.pi) + logdet_s + quad)
            cov = jcho_solve((lg, True), eye_s)
            mean = cov @ (jcho_solve((lp, True), mean_pred) + ctwy_t / s2)
            return mean, 0.5 * (cov + cov.T), loglik

        mean0, cov0, ll0 = assimilate(
            jnp.zeros(sdim), p0, (ctwc[0], ctwy[0], yy[0], nobs[0])
        )

        def step(carry, stats):
            mean, cov = carry
            mean_pred = a_full @ mean
            cov_pred = a_full @ cov @ a_full.T + q_full
            mean, cov, loglik = assimilate(mean_pred, cov_pred, stats)
            return (mean, cov), loglik

        (_, _), lls = jax.lax.scan(
            step, (mean0, cov0), (ctwc[1:], ctwy[1:], yy[1:], nobs[1:])
        )
        log_marginal = ll0 + jnp.sum(lls)

        v = jax.scipy.linalg.solve_triangular(lzz, kxz.T, lower=True)
        kdiag = jnp.exp(p_spat[0])
        deficit = jnp.clip(kdiag - jnp.sum(v * v, axis=0), 0.0, None)
        penalty = 0.5 * kappa0 / s2 * jnp.sum(obs_per_location * deficit)
        separation = _separation_penalty(z, min_separation, separation_weight)
        return log_marginal - penalty - separation

    return Objective(
        value=jax.jit(raw),
        value_and_grad=jax.jit(jax.value_and_grad(raw)),
        n_free=int(n_free),
        fit_hyperparameters=bool(fit_hyperparameters),
        kernel=kernel,
        sigma2=float(sigma2),
    )


def build_mes_objective(
    kernel: Separable,
    inducing: np.ndarray,
    posterior_cov_mean: np.ndarray,
    fixed_design: np.ndarray,
    n_free: int,
) -> Objective:
    """log det of the spatial predictive covariance factor at the design.

    cov_S(d) = K_dd - K_dZ K_ZZ^{-1} K_Zd + B_d Ahat B_d'

    with ``Ahat`` the time-averaged inducing covariance divided by
    k_t(0), so the prior limit recovers ``K_dd`` itself.
    """
    spat_n, spat_fn = _spatial_builder(kernel.spatial)
    p_spat = jnp.asarray(kernel.spatial.log_params())
    z = jnp.asarray(np.asarray(inducing, dtype=float))
    ahat = jnp.asarray(np.asarray(posterior_cov_mean, dtype=float)) / kernel.temporal.variance
    fixed = jnp.asarray(np.asarray(fixed_design, dtype=float).reshape(-1, z.shape[1]))
    n_fixed = int(fixed.shape[0])

    def raw(theta):
        free = theta.reshape(n_free, z.shape[1])
        design = jnp.concatenate([fixed, free], axis=0) if n_fixed else free
        kzz = _jittered(spat_fn(p_spat, z, z))
        lzz = jnp.linalg.cholesky(kzz)
        kdz = spat_fn(p_spat, design, z)
        b = jcho_solve((lzz, True), kdz.T).T
        kdd = spat_fn(p_spat, design, design)
        cov = kdd - b @ kdz.T + b @ ahat @ b.T
        cov = _jittered(0.5 * (cov + cov.T))
        lc = jnp.linalg.cholesky(cov)
        return 2.0 * jnp.sum(jnp.log(jnp.diag(lc)))

    return Objective(
        value=jax.jit(raw),
        value_and_grad=jax.jit(jax.value_and_grad(raw)),
        n_free=int(n_free),
        fit_hyperparameters=False,
        kernel=kernel,
        sigma2=1.0,
    )


def build_imse_objective(
    kernel: Separable,
    prediction_grid: np.ndarray,
    fixed_design: np.ndarray,
    n_free: int,
    dt: float,
    n_steps: int,
    sigma2: float,
) -> Objective:
    """Negative integrated posterior predictive variance over the grid.

    The candidate design acts as both the inducing set and the location
    of noisy observations at every step; since observing at the inducing
    points makes the sparse posterior exact, the recursion computes the
    exact Gauss-Markov posterior covariance, and observed values never
    enter. Returns the negation so the shared loop maximizes it.
    """
    spat_n, spat_fn = _spatial_builder(kernel.spatial)
    temp_n, state_d, temp_fn = _temporal_builder(kernel.temporal)
    p_spat = jnp.asarray(kernel.spatial.log_params())
    p_temp = jnp.asarray(kernel.temporal.log_params())
    grid = jnp.asarray(np.asarray(prediction_grid, dtype=float))
    fixed = jnp.asarray(np.asarray(fixed_design, dtype=float).reshape(-1, grid.shape[1]))
    n_fixed = int(fixed.shape[0])
    if n_steps < 1:
        raise InputError("imse objective needs n_steps >= 1")

    def raw(theta):
        free = theta.reshape(n_free, grid.shape[1])
        design = jnp.concatenate([fixed, free], axis=0) if n_fixed else free
        n_design = design.shape[0]
        kdd = _jittered(spat_fn(p_spat, design, design))
        ldd = jnp.linalg.cholesky(kdd)
        kxd = spat_fn(p_spat, grid, design)
        bstar = jcho_solve((ldd, True), kxd.T).T               # (Ngrid, n)

        f_mat, pinf_t, h, kappa0 = temp_fn(p_temp)
        a_t = jexpm(f_mat * dt)
        q_t = pinf_t - a_t @ pinf_t @ a_t.T
        a_full = jnp.kron(jnp.eye(n_design), a_t)
        q_full = jnp.kron(kdd, 0.5 * (q_t + q_t.T))
        p0 = jnp.kron(kdd, pinf_t)
        sdim = n_design * state_d
        eye_s = jnp.eye(sdim)
        # Observations at the design points: emission I (x) h.
        ctc = jnp.kron(jnp.eye(n_design), jnp.outer(h, h))

        def assimilate_cov(cov_pred):
            lp = jnp.linalg.cholesky(0.5 * (cov_pred + cov_pred.T))
            pinv = jcho_solve((lp, True), eye_s)
            info = 0.5 * (pinv + pinv.T) + ctc / sigma2
            lg = jnp.linalg.cholesky(0.5 * (info + info.T))
            cov = jcho_solve((lg, True), eye_s)
            return 0.5 * (cov + cov.T)

        cov0 = assimilate_cov(p0)

        def fwd(cov, _):
            cov_pred = a_full @ cov @ a_full.T + q_full
            cov_new = assimilate_cov(cov_pred)
            return cov_new, (cov_new, 0.5 * (cov_pred + cov_pred.T))

        cov_last, (covs, cov_preds) = jax.lax.scan(fwd, cov0, None, length=n_steps - 1)
        covs = jnp.concatenate([cov0[None], covs], axis=0)

        def bwd(cov_next_smooth, inp):
            cov_f, cov_pred_next = inp
            gain = jcho_solve(
                (jnp.linalg.cholesky(cov_pred_next), True), a_full @ cov_f
            ).T
            cov_s = cov_f + gain @ (cov_next_smooth - cov_pred_next) @ gain.T
            cov_s = 0.5 * (cov_s + cov_s.T)
            return cov_s, cov_s

        _, smoothed_head = jax.lax.scan(
            bwd, covs[-1], (covs[:-1], cov_preds), reverse=True
        )
        smoothed = jnp.concatenate([smoothed_head, covs[-1][None]], axis=0)

        proj = jnp.kron(jnp.eye(n_design), h.reshape(1, state_d))
        u_covs = jnp.einsum("ud,tde,ve->tuv", proj, smoothed, proj)
        var_design = jnp.einsum("nu,tuv,nv->tn", bstar, u_covs, bstar)
        v = jax.scipy.linalg.solve_triangular(ldd, kxd.T, lower=True)
        deficit = jnp.clip(jnp.exp(p_spat[0]) - jnp.sum(v * v, axis=0), 0.0, None)
        total = jnp.sum(var_design) + n_steps * kappa0 * jnp.sum(deficit)
        return -total

    return Objective(
        value=jax.jit(raw),
        value_and_grad=jax.jit(jax.value_and_grad(raw)),
        n_free=int(n_free),
        fit_hyperparameters=False,
        kernel=kernel,
        sigma2=float(sigma2),
    )


# -- optimization --


def finite_diff_grad(fun, theta: np.ndarray, step: float) -> np.ndarray:
    """Central finite differences of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        probe = theta.copy()
        probe[i] = theta[i] + step
        hi = float(fun(probe))
        probe[i] = theta[i] - step
        lo = float(fun(probe))
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def _cosine_lr(iteration: int, config: OptimizerConfig) -> float:
    if config.max_iters <= 1:
        return config.lr_init
    frac = iteration / (config.max_iters - 1)
    return config.lr_final + 0.5 * (config.lr_init - config.lr_final) * (
        1.0 + math.cos(math.pi * frac)
    )


def maximize(
    value_and_grad,
    theta0: np.ndarray,
    config: OptimizerConfig,
    project=None,
    on_accept=None,
) -> tuple[np.ndarray, float, np.ndarray]:
    """Monotone first-order ascent with per-coordinate step adaptation.

    Proposes Adam-style steps on a cosine-decayed learning rate and only
    accepts iterates that do not decrease the objective; rejected steps
    shrink a trust factor instead. The returned trace therefore contains
    the non-decreasing sequence of accepted objective values.
    ``on_accept(theta)`` is called for the initial point and every
    accepted iterate.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    if project is not None:
        theta = project(theta)
    value, grad = value_and_grad(theta)
    value, grad = float(value), np.asarray(grad, dtype=float)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise OptimizationError("objective is not finite at the initial point")
    if on_accept is not None:
        on_accept(theta.copy())

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    moment1 = np.zeros_like(theta)
    moment2 = np.zeros_like(theta)
    trust = 1.0
    adam_steps = 0
    trace = [value]
    stall = 0

    for iteration in range(config.max_iters):
        lr = _cosine_lr(iteration, config)
        m1_next = beta1 * moment1 + (1.0 - beta1) * grad
        m2_next = beta2 * moment2 + (1.0 - beta2) * grad * grad
        t = adam_steps + 1
        direction = (m1_next / (1.0 - beta1**t)) / (
            np.sqrt(m2_next / (1.0 - beta2**t)) + eps
        )
        proposal = theta + trust * lr * direction
        if project is not None:
            proposal = project(proposal)
        new_value, new_grad = value_and_grad(proposal)
        new_value, new_grad = float(new_value), np.asarray(new_grad, dtype=float)
        improved = (
            np.isfinite(new_value)
            and np.all(np.isfinite(new_grad))
            and new_value >= value
        )
        if improved:
            gain = new_value - value
            theta, value, grad = proposal, new_value, new_grad
            moment1, moment2 = m1_next, m2_next
            adam_steps = t
            trust = min(1.0, trust * 1.3)
            trace.append(value)
            if on_accept is not None:
                on_accept(theta.copy())
            stall = stall + 1 if gain < config.tol else 0
        else:
            trust *= 0.5
            stall += 1
        if stall >= config.patience:
            break
    return theta, value, np.asarray(trace)
