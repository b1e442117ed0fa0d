"""Spatiotemporal sparse variational GP with a Markovian time axis.

A separable kernel ``k_s * k_t`` evaluated at M spatial inducing points
induces a Gauss-Markov chain over the stacked temporal states of those
points (spatial index major). Conditioning the chain on the pseudo
observation model

    y_t = B u_t + e_t,   B = K_s(X, Z) K_s(Z, Z)^{-1},   e_t ~ N(0, s2 I)

by one Kalman filter and RTS smoother pass reproduces the optimal
variational posterior of the equivalent dense sparse GP whose inducing
set is Z replicated over the full time grid, and the filter's log
marginal minus the Nystrom trace penalty reproduces the collapsed bound.
Cost is linear in the number of time steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .datasets import BoxTransform, GridDataset
from .errors import InputError
from .kernels import Kernel, Separable, to_state_space
from .markov_gp import FilterResult, StateSpaceModel, kalman_filter, rts_smoother
from .sparse_vgp import InducingSet, VARIANCE_CLAMP_WARN

import warnings

__all__ = [
    "StGpModel",
    "StPosterior",
    "PredictiveField",
    "FitResult",
    "build_inducing_chain",
    "st_elbo",
    "st_fit_posterior",
    "st_predict",
    "test_time_update",
]

GRID_MATCH_TOL = 1e-9


@dataclass(frozen=True)
class StGpModel:
    """Separable-kernel model tied to one spatial grid and time grid."""

    kernel: Separable
    inducing: InducingSet
    spatial_grid: np.ndarray
    time_grid: np.ndarray
    sigma2: float

    def __post_init__(self):
        if not isinstance(self.kernel, Separable):
            raise InputError("StGpModel needs a Separable(spatial, temporal) kernel")
        if not isinstance(self.inducing, InducingSet):
            object.__setattr__(self, "inducing", InducingSet(self.inducing))
        grid = np.asarray(self.spatial_grid, dtype=float)
        times = np.asarray(self.time_grid, dtype=float)
        if grid.ndim != 2 or grid.shape[1] != self.kernel.spatial.input_dim:
            raise InputError(
                f"spatial grid shape {grid.shape} does not match spatial kernel "
                f"dimension {self.kernel.spatial.input_dim}"
            )
        if self.inducing.locations.shape[1] != grid.shape[1]:
            raise InputError("inducing locations and spatial grid disagree on dimension")
        if times.ndim != 1 or times.size == 0:
            raise InputError("time grid must be a non-empty 1-D array")
        if times.size > 1:
            diffs = np.diff(times)
            if np.any(diffs <= 0.0):
                raise InputError("time grid must be strictly increasing")
            if float(diffs.max() - diffs.min()) > GRID_MATCH_TOL * float(diffs.mean()):
                raise InputError("time grid must be uniformly spaced")
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 <= 0.0:
            raise InputError(f"sigma2 must be positive and finite, got {sigma2}")
        object.__setattr__(self, "spatial_grid", grid)
        object.__setattr__(self, "time_grid", times)
        object.__setattr__(self, "sigma2", sigma2)
        # Temporal kernel must admit the chain; fail at construction, not use.
        self.kernel.temporal.to_sde()

    @property
    def n_inducing(self) -> int:
        return len(self.inducing)

    @property
    def n_locations(self) -> int:
        return self.spatial_grid.shape[0]

    @property
    def n_times(self) -> int:
        return self.time_grid.size

    @property
    def dt(self) -> float:
        if self.time_grid.size < 2:
            return 1.0
        return float(np.mean(np.diff(self.time_grid)))


@dataclass
class StPosterior:
    """Per-step variational moments of the inducing values u_t."""

    means: np.ndarray      # (n_times, M)
    covs: np.ndarray       # (n_times, M, M)
    elbo: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        if (
            self.means.ndim != 2
            or self.covs.shape != (*self.means.shape, self.means.shape[1])
        ):
            raise InputError(
                f"posterior shapes disagree: means {self.means.shape}, covs {self.covs.shape}"
            )


@dataclass
class PredictiveField:
    """Marginal predictive moments on a set of locations over the time grid."""

    mean: np.ndarray       # (n_times, n_points)
    var: np.ndarray        # (n_times, n_points)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mean.shape != self.var.shape or self.mean.ndim != 2:
            raise InputError(
                f"predictive shapes disagree: mean {self.mean.shape}, var {self.var.shape}"
            )


@dataclass
class FitResult:
    """Trained model state: locations, hyperparameters, variational moments."""

    model: StGpModel
    posterior: StPosterior
    transform: BoxTransform | None = None
    objective_trace: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def elbo(self) -> float:
        return self.posterior.elbo


def build_inducing_chain(model: StGpModel) -> StateSpaceModel:
    """Gauss-Markov chain over the stacked inducing states.

    State ordering is spatial-major: the chain state stacks one temporal
    state block per inducing point, so the blocks are

        transition    I_M (x) A_t
        process noise K_MM (x) Q_t
        initial cov   K_MM (x) Pinf
        emission to u I_M (x) H

    which reproduces Cov(u_t, u_{t+k}) = k_t(k dt) K_MM exactly.
    """
    sde, a_t, q_t = to_state_space(model.kernel.temporal, model.dt)
    kmm = model.kernel.spatial.matrix(model.inducing.locations)
    m = model.n_inducing
    return StateSpaceModel(
        A=np.kron(np.eye(m), a_t),
        Q=np.kron(kmm, q_t),
        H=np.kron(np.eye(m), sde.H),
        P0=np.kron(kmm, sde.Pinf),
        obs_noise=model.sigma2,
    )


@dataclass(frozen=True)
class _PseudoParts:
    """Chain plus the spatial projection pieces shared by every routine."""

    chain: StateSpaceModel        # emits u_t (obs dim M)
    pseudo: StateSpaceModel       # emits B u_t (obs dim n_locations)
    projector: np.ndarray         # B, (n_locations, M)
    temporal_h: np.ndarray        # (1, d_t)
    deficit: np.ndarray           # k_s(x,x) - Nystrom diag, per location
    kappa_t0: float


def _pseudo_parts(model: StGpModel) -> _PseudoParts:
    chain = build_inducing_chain(model)
    spatial = model.kernel.spatial
    kmm = spatial.matrix(model.inducing.locations)
    kmx = spatial.matrix(model.inducing.locations, model.spatial_grid)
    lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
    projector = linalg.chol_solve(lm, kmx).T
    v = linalg.solve_lower(lm, kmx)
    deficit = np.clip(spatial.diag(model.spatial_grid) - np.sum(v * v, axis=0), 0.0, None)
    pseudo = StateSpaceModel(
        A=chain.A,
        Q=chain.Q,
        H=projector @ chain.H,
        P0=chain.P0,
        obs_noise=model.sigma2,
    )
    sde = model.kernel.temporal.to_sde()
    return _PseudoParts(chain, pseudo, projector, sde.H, deficit, model.kernel.temporal.variance)


def _check_data(model: StGpModel, data: GridDataset) -> None:
    if data.spatial_locations.shape != model.spatial_grid.shape or not np.allclose(
        data.spatial_locations, model.spatial_grid, rtol=0.0, atol=GRID_MATCH_TOL
    ):
        raise InputError("dataset spatial grid does not match the model grid")
    if data.times.shape != model.time_grid.shape or not np.allclose(
        data.times, model.time_grid, rtol=0.0, atol=GRID_MATCH_TOL * max(1.0, model.dt)
    ):
        raise InputError("dataset time grid does not match the model grid")


def _trace_penalty(parts: _PseudoParts, mask: np.ndarray, sigma2: float) -> float:
    observed_per_location = mask.sum(axis=0).astype(float)
    return 0.5 * parts.kappa_t0 / sigma2 * float(observed_per_location @ parts.deficit)


def st_elbo(model: StGpModel, data: GridDataset) -> float:
    """Collapsed bound: pseudo-model log marginal minus the trace penalty."""
    _check_data(model, data)
    parts = _pseudo_parts(model)
    filtered = kalman_filter(parts.pseudo, data.values, data.mask)
    return filtered.log_marginal_likelihood - _trace_penalty(parts, data.mask, model.sigma2)


def _project_posterior(
    model: StGpModel, parts: _PseudoParts, means: np.ndarray, covs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    m, d = model.n_inducing, parts.temporal_h.shape[1]
    h = parts.temporal_h.reshape(d)
    u_means = means.reshape(-1, m, d) @ h
    cov4 = covs.reshape(-1, m, d, m, d)
    u_covs = np.einsum("a,tiajb,b->tij", h, cov4, h, optimize=True)
    return u_means, 0.5 * (u_covs + np.transpose(u_covs, (0, 2, 1)))


def st_fit_posterior(model: StGpModel, data: GridDataset) -> StPosterior:
    """One filter plus smoother pass; exact for the Gaussian likelihood."""
    _check_data(model, data)
    parts = _pseudo_parts(model)
    filtered = kalman_filter(parts.pseudo, data.values, data.mask)
    smoothed = rts_smoother(parts.pseudo, filtered)
    u_means, u_covs = _project_posterior(model, parts, smoothed.means, smoothed.covs)
    elbo = filtered.log_marginal_likelihood - _trace_penalty(parts, data.mask, model.sigma2)
    return StPosterior(u_means, u_covs, elbo)


def st_predict(
    model: StGpModel, posterior: StPosterior, xstar: np.ndarray
) -> PredictiveField:
    """Marginal predictive moments at spatial points on the model's time grid.

    mean_t = B* mu_t
    var_t  = k_t(0) diag(K_** - K_*M K_MM^{-1} K_M*) + diag(B* A_t B*')
    """
    xstar = np.asarray(xstar, dtype=float)
    if posterior.means.shape[1] != model.n_inducing:
        raise InputError(
            f"posterior covers {posterior.means.shape[1]} inducing values, "
            f"model has {model.n_inducing}"
        )
    spatial = model.kernel.spatial
    kmm = spatial.matrix(model.inducing.locations)
    kms = spatial.matrix(model.inducing.locations, xstar)
    lm, _ = linalg.chol_psd(kmm, what="inducing covariance")
    bstar = linalg.chol_solve(lm, kms).T
    v = linalg.solve_lower(lm, kms)
    resid = model.kernel.temporal.variance * np.clip(
        spatial.diag(xstar) - np.sum(v * v, axis=0), 0.0, None
    )
    mean = posterior.means @ bstar.T
    var = resid[None, :] + np.einsum("ij,tjk,ik->ti", bstar, posterior.covs, bstar, optimize=True)
    worst = float(var.min(initial=0.0))
    if worst < VARIANCE_CLAMP_WARN:
        warnings.warn(
            f"spatiotemporal predictive: clamping variance of {worst:.3e} to zero",
            RuntimeWarning,
            stacklevel=2,
        )
    return PredictiveField(mean, np.clip(var, 0.0, None))


def _grid_indices(model: StGpModel, locations: np.ndarray) -> np.ndarray:
    """Match rows of ``locations`` to rows of the model's spatial grid."""
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[1] != model.spatial_grid.shape[1]:
        raise InputError(f"design locations must be (n, {model.spatial_grid.shape[1]})")
    scale = max(1.0, float(np.abs(model.spatial_grid).max()))
    indices = np.empty(locations.shape[0], dtype=int)
    for i, loc in enumerate(locations):
        dist = np.max(np.abs(model.spatial_grid - loc[None, :]), axis=1)
        hits = np.flatnonzero(dist <= GRID_MATCH_TOL * scale)
        if hits.size != 1:
            raise InputError(
                f"design location {loc} matches {hits.size} grid points; "
                "designs must sit exactly on the spatial grid"
            )
        indices[i] = hits[0]
    if np.unique(indices).size != indices.size:
        raise InputError("design locations map to duplicate grid points")
    return indices


def test_time_update(
    model: StGpModel,
    trained: StPosterior,
    design_locations: np.ndarray,
    test_values: np.ndarray,
    test_mask: np.ndarray | None = None,
    *,
    reuse: str = "auto",
) -> StPosterior:
    """Refresh the posterior means from sensor observations only.

    Runs one filter plus smoother pass on the pseudo-model restricted to
    the design's rows and keeps the trained covariance sequence, so only
    the means react to the test data. ``reuse`` selects how the trained
    covariances are carried over: "per-step" requires matching lengths,
    "averaged" uses the time average, "auto" picks per-step when the
    lengths match and averaged otherwise.
    """
    if reuse not in ("auto", "per-step", "averaged"):
        raise InputError(f"reuse must be auto, per-step or averaged, got {reuse!r}")
    test_values = np.asarray(test_values, dtype=float)
    indices = _grid_indices(model, design_locations)
    if test_values.ndim != 2 or test_values.shape[1] != indices.size:
        raise InputError(
            f"test observations shape {test_values.shape} does not match "
            f"{indices.size} design locations"
        )
    n_steps = test_values.shape[0]
    if trained.means.shape[1] != model.n_inducing:
        raise InputError("trained posterior does not match the model's inducing set")

    parts = _pseudo_parts(model)
    restricted = StateSpaceModel(
        A=parts.pseudo.A,
        Q=parts.pseudo.Q,
        H=parts.pseudo.H[indices],
        P0=parts.pseudo.P0,
        obs_noise=model.sigma2,
    )
    filtered = kalman_filter(restricted, test_values, test_mask)
    smoothed = rts_smoother(restricted, filtered)
    u_means, _ = _project_posterior(model, parts, smoothed.means, smoothed.covs)

    if reuse == "auto":
        reuse = "per-step" if trained.covs.shape[0] == n_steps else "averaged"
    if reuse == "per-step":
        if trained.covs.shape[0] != n_steps:
            raise InputError(
                f"per-step reuse needs {n_steps} trained covariances, "
                f"posterior has {trained.covs.shape[0]}"
            )
        covs = trained.covs.copy()
    else:
        covs = np.broadcast_to(
            trained.covs.mean(axis=0), (n_steps, *trained.covs.shape[1:])
        ).copy()

    deficit_term = 0.5 * parts.kappa_t0 / model.sigma2 * float(
        (np.isfinite(test_values) if test_mask is None else np.asarray(test_mask, bool))
        .sum(axis=0)
        .astype(float)
        @ parts.deficit[indices]
    )
    elbo = filtered.log_marginal_likelihood - deficit_term
    return StPosterior(u_means, covs, elbo)
