"""Linear-Gaussian state-space inference: Kalman filter, RTS smoother, sampling.

The filter accumulates the exact log marginal likelihood during the
forward pass, so Gaussian-likelihood models need no iteration. Partially
or fully missing observation vectors are handled through an explicit
boolean mask; missing entries contribute nothing to the log marginal.
Covariance updates use the Joseph form throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import InputError, NumericalError

__all__ = [
    "StateSpaceModel",
    "FilterResult",
    "SmootherResult",
    "kalman_filter",
    "rts_smoother",
    "sample_prior",
]


@dataclass(frozen=True)
class StateSpaceModel:
    """Time-invariant or per-step linear-Gaussian model.

    x_0 ~ N(m0, P0),  x_n = A_n x_{n-1} + q_n,  q_n ~ N(0, Q_n),
    y_n = H x_n + e_n,  e_n ~ N(0, diag(obs_noise)).

    ``A`` and ``Q`` are either single ``(d, d)`` matrices shared by every
    step or stacks of shape ``(n_steps - 1, d, d)`` where entry ``k``
    moves the state from step ``k`` to ``k + 1``. ``obs_noise`` is a
    positive scalar variance or a vector with one entry per output row.
    """

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    P0: np.ndarray
    obs_noise: float | np.ndarray
    m0: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "P0", np.asarray(self.P0, dtype=float))
        d = self.state_dim
        if self.A.shape[-2:] != (d, d) or self.A.ndim not in (2, 3):
            raise InputError(f"transition matrix shape {self.A.shape} does not match state dim {d}")
        if self.Q.shape != self.A.shape:
            raise InputError(f"process noise shape {self.Q.shape} != transition shape {self.A.shape}")
        if self.H.ndim != 2 or self.H.shape[1] != d:
            raise InputError(f"emission matrix shape {self.H.shape} does not match state dim {d}")
        if self.P0.shape != (d, d):
            raise InputError(f"P0 shape {self.P0.shape} does not match state dim {d}")
        m0 = np.zeros(d) if self.m0 is None else np.asarray(self.m0, dtype=float)
        if m0.shape != (d,):
            raise InputError(f"m0 shape {m0.shape} does not match state dim {d}")
        object.__setattr__(self, "m0", m0)
        noise = np.asarray(self.obs_noise, dtype=float)
        if noise.ndim == 0:
            noise = np.full(self.obs_dim, float(noise))
        if noise.shape != (self.obs_dim,):
            raise InputError(f"obs_noise shape {noise.shape} does not match obs dim {self.obs_dim}")
        if np.any(noise <= 0.0) or not np.all(np.isfinite(noise)):
            raise InputError("obs_noise must be positive and finite")
        object.__setattr__(self, "obs_noise", noise)

    @property
    def state_dim(self) -> int:
        return self.P0.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    def transition(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """(A, Q) moving the state from ``step - 1`` to ``step``."""
        if self.A.ndim == 2:
            return self.A, self.Q
        return self.A[step - 1], self.Q[step - 1]


@dataclass
class FilterResult:
    means: np.ndarray
    covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    step_loglik: np.ndarray
    log_marginal_likelihood: float = field(init=False)

    def __post_init__(self):
        self.log_marginal_likelihood = float(np.sum(self.step_loglik))


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray


def _validate_obs(model: StateSpaceModel, obs: np.ndarray, mask: np.ndarray | None):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.ndim != 2 or obs.shape[1] != model.obs_dim:
        raise InputError(
            f"observations shape {obs.shape} does not match obs dim {model.obs_dim}"
        )
    if obs.shape[0] == 0:
        raise InputError("observation sequence is empty")
    if mask is None:
        mask = np.isfinite(obs)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[:, None]
        if mask.shape != obs.shape:
            raise InputError(f"mask shape {mask.shape} != observations shape {obs.shape}")
    if not np.all(np.isfinite(obs[mask])):
        raise InputError("observed entries contain non-finite values")
    if model.A.ndim == 3 and model.A.shape[0] != obs.shape[0] - 1:
        raise InputError(
            f"per-step transitions cover {model.A.shape[0] + 1} steps, "
            f"observations have {obs.shape[0]}"
        )
    return obs, mask


def kalman_filter(
    model: StateSpaceModel,
    obs: np.ndarray,
    mask: np.ndarray | None = None,
    start_state: tuple[np.ndarray, np.ndarray] | None = None,
) -> FilterResult:
    """Forward pass with exact log marginal accumulation.

    ``mask`` marks observed entries; omitted, it defaults to the finite
    entries of ``obs``. ``start_state`` chains batches: it is the
    filtered ``(mean, cov)`` of the step immediately before ``obs[0]``,
    so step 0 is then reached through one transition instead of the
    prior ``(m0, P0)``.
    """
    obs, mask = _validate_obs(model, obs, mask)
    n_steps, _ = obs.shape
    d = model.state_dim
    eye = np.eye(d)

    means = np.empty((n_steps, d))
    covs = np.empty((n_steps, d, d))
    pred_means = np.empty((n_steps, d))
    pred_covs = np.empty((n_steps, d, d))
    step_loglik = np.zeros(n_steps)

    for n in range(n_steps):
        if n == 0:
            if start_state is None:
                mean_pred, cov_pred = model.m0, model.P0
            else:
                prev_mean, prev_cov = start_state
                a, q = model.transition(1) if model.A.ndim == 3 else (model.A, model.Q)
                mean_pred = a @ prev_mean
                cov_pred = linalg.symmetrize(a @ prev_cov @ a.T + q)
        else:
            a, q = model.transition(n)
            mean_pred = a @ means[n - 1]
            cov_pred = linalg.symmetrize(a @ covs[n - 1] @ a.T + q)

        pred_means[n] = mean_pred
        pred_covs[n] = cov_pred

        observed = mask[n]
        if not np.any(observed):
            means[n] = mean_pred
            covs[n] = cov_pred
            continue

        h = model.H[observed]
        noise = model.obs_noise[observed]
        resid = obs[n, observed] - h @ mean_pred
        innov_cov = h @ cov_pred @ h.T + np.diag(noise)
        try:
            chol, _ = linalg.chol_psd(innov_cov, what=f"innovation covariance at step {n}")
        except NumericalError as err:
            raise NumericalError(f"filter update failed at step {n}: {err}") from err
        alpha = linalg.solve_lower(chol, resid)
        k = int(observed.sum())
        step_loglik[n] = -0.5 * (
            k * np.log(2.0 * np.pi) + linalg.logdet_from_chol(chol) + float(alpha @ alpha)
        )
        gain = linalg.chol_solve(chol, h @ cov_pred).T
        means[n] = mean_pred + gain @ resid
        joseph = eye - gain @ h
        covs[n] = linalg.symmetrize(
            joseph @ cov_pred @ joseph.T + gain @ np.diag(noise) @ gain.T
        )

    return FilterResult(means, covs, pred_means, pred_covs, step_loglik)


def rts_smoother(model: StateSpaceModel, filtered: FilterResult) -> SmootherResult:
    """Backward Rauch-Tung-Striebel pass over a completed filter result."""
    n_steps, d = filtered.means.shape
    means = np.empty_like(filtered.means)
    covs = np.empty_like(filtered.covs)
    means[-1] = filtered.means[-1]
    covs[-1] = filtered.covs[-1]
    for n in range(n_steps - 2, -1, -1):
        a, _ = model.transition(n + 1)
        cov_pred = filtered.pred_covs[n + 1]
        try:
            gain = linalg.solve_psd(
                cov_pred, a @ filtered.covs[n], what=f"predicted covariance at step {n + 1}"
            ).T
        except NumericalError as err:
            raise NumericalError(f"smoother failed at step {n + 1}: {err}") from err
        means[n] = filtered.means[n] + gain @ (means[n + 1] - filtered.pred_means[n + 1])
        covs[n] = linalg.symmetrize(
            filtered.covs[n] + gain @ (covs[n + 1] - cov_pred) @ gain.T
        )
    return SmootherResult(means, covs)


def sample_prior(
    model: StateSpaceModel, n_steps: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one state trajectory and its noiseless emissions.

    Returns ``(states, emitted)`` with shapes ``(n_steps, d)`` and
    ``(n_steps, obs_dim)``. Observation noise is left to the caller.
    """
    if n_steps < 1:
        raise InputError(f"n_steps must be >= 1, got {n_steps}")
    if model.A.ndim == 3 and model.A.shape[0] != n_steps - 1:
        raise InputError(
            f"per-step transitions cover {model.A.shape[0] + 1} steps, asked for {n_steps}"
        )
    rng = np.random.default_rng(seed)
    d = model.state_dim
    states = np.empty((n_steps, d))
    states[0] = model.m0 + linalg.psd_sqrt(model.P0) @ rng.standard_normal(d)
    noise_sqrts: dict[int, np.ndarray] = {}
    for n in range(1, n_steps):
        a, q = model.transition(n)
        key = 0 if model.A.ndim == 2 else n - 1
        if key not in noise_sqrts:
            noise_sqrts[key] = linalg.psd_sqrt(q)
        states[n] = a @ states[n - 1] + noise_sqrts[key] @ rng.standard_normal(d)
    return states, states @ model.H.T
