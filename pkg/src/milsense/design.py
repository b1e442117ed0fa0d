"""Sensor placement strategies.

The main entry point is :func:`mil_design`, which places sensors at the
inducing locations of a sparse spatiotemporal GP fitted to simulation
output by maximizing the collapsed evidence bound. Reference strategies
(uniform, Latin hypercube, maximum-entropy search, integrated predictive
variance, subset removal) share the same ``SensorDesign`` result type so
that evaluation code does not care where a design came from.

All strategies optimize in normalized coordinates internally and return
designs in the coordinates of the data they were given. Free locations
are snapped to the candidate grid at the end; fixed locations pass
through bit-identical.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from . import _objectives
from ._objectives import OptimizerConfig, finite_diff_grad, maximize
from .datasets import BoxTransform, DomainHull, GridDataset, convex_hull, hull_project
from .errors import InputError, NumericalError, OptimizationError
from .kernels import Kernel, Separable, kernel_matrix
from .linalg import chol_psd, logdet_from_chol
from .sparse_vgp import InducingSet
from .stsvgp import FitResult, StGpModel, st_elbo, st_fit_posterior

GRID_MATCH_TOL = 1e-9
MAX_REMOVAL_SUBSETS = 100_000
GRADIENT_CHECK_TOL = 1e-4

DESIGN_STRATEGIES = ("mil", "uniform", "lhs", "mes", "imse", "removal")

__all__ = [
    "DESIGN_STRATEGIES",
    "OptimizerConfig",
    "SensorDesign",
    "design_from_dict",
    "gaussian_eig",
    "imse_design",
    "lhs_design",
    "mes_design",
    "mil_design",
    "sensor_removal",
    "uniform_design",
    "utility",
]


@dataclass(frozen=True)
class SensorDesign:
    """A set of sensor locations plus how it was produced.

    ``fixed`` marks locations that were constrained, not chosen. The
    JSON form round-trips through :meth:`to_dict`/:func:`design_from_dict`.
    """

    locations: np.ndarray
    fixed: np.ndarray = None
    strategy: str = "manual"
    seed: int | None = None

    def __post_init__(self):
        loc = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if loc.ndim != 2 or loc.shape[0] < 1:
            raise InputError(f"design locations must be a (n, d) array, got {loc.shape}")
        if not np.all(np.isfinite(loc)):
            raise InputError("design locations must be finite")
        if self.fixed is None:
            fixed = np.zeros(loc.shape[0], dtype=bool)
        else:
            fixed = np.asarray(self.fixed, dtype=bool).reshape(-1)
            if fixed.shape[0] != loc.shape[0]:
                raise InputError(
                    f"fixed mask has {fixed.shape[0]} entries for {loc.shape[0]} locations"
                )
        if not isinstance(self.strategy, str) or not self.strategy:
            raise InputError("strategy must be a non-empty string")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "fixed", fixed)

    @property
    def n_sensors(self) -> int:
        return self.locations.shape[0]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "locations": self.locations.tolist(),
            "fixed": self.fixed.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def design_from_dict(payload: dict) -> SensorDesign:
    if not isinstance(payload, dict):
        raise InputError("design document must be a JSON object")
    allowed = {"strategy", "seed", "locations", "fixed"}
    unknown = set(payload) - allowed
    if unknown:
        raise InputError(f"unknown design field {sorted(unknown)[0]!r}")
    if "locations" not in payload:
        raise InputError("design document is missing 'locations'")
    seed = payload.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise InputError("design seed must be an integer or null")
    return SensorDesign(
        locations=np.asarray(payload["locations"], dtype=float),
        fixed=None if payload.get("fixed") is None else np.asarray(payload["fixed"]),
        strategy=payload.get("strategy", "manual"),
        seed=seed,
    )


def load_design(path) -> SensorDesign:
    return design_from_dict(json.loads(Path(path).read_text()))


# -- grid helpers --


def _as_points(points, *, what: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(points, dtype=float))
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise InputError(f"{what} must be a (n, d) array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{what} must be finite")
    return arr


def _match_rows(grid: np.ndarray, points: np.ndarray, *, what: str) -> np.ndarray:
    """Indices of ``points`` rows in ``grid``, exact up to rounding."""
    scale = max(1.0, float(np.abs(grid).max()))
    indices = np.empty(points.shape[0], dtype=int)
    for i, p in enumerate(points):
        dist = np.max(np.abs(grid - p[None, :]), axis=1)
        j = int(np.argmin(dist))
        if dist[j] > GRID_MATCH_TOL * scale:
            raise InputError(f"{what} {p.tolist()} is not a candidate grid point")
        indices[i] = j
    if np.unique(indices).size != indices.size:
        raise InputError(f"{what} contains duplicate grid points")
    return indices


def _snap_to_grid(grid: np.ndarray, points: np.ndarray, taken: set[int]) -> np.ndarray:
    """Nearest unused grid row for each point, closest points claiming first."""
    used = set(taken)
    order = np.argsort(
        [np.min(np.sum((grid - p[None, :]) ** 2, axis=1)) for p in points]
    )
    indices = np.empty(points.shape[0], dtype=int)
    for i in order:
        ranked = np.argsort(np.sum((grid - points[i][None, :]) ** 2, axis=1))
        j = next(int(r) for r in ranked if int(r) not in used)
        used.add(j)
        indices[i] = j
    return indices


def _kmeans_init(grid: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 1:
        return grid.mean(axis=0, keepdims=True)
    centroids, _ = kmeans2(grid, k, minit="++", seed=rng)
    return centroids


def _pool_size(n_tasks: int) -> int:
    """Worker count for restart/subset pools, bounded by MILSENSE_THREADS."""
    raw = os.environ.get("MILSENSE_THREADS")
    if raw is None:
        return 1
    try:
        bound = int(raw)
    except ValueError:
        raise InputError(f"MILSENSE_THREADS must be an integer, got {raw!r}")
    return max(1, min(bound, n_tasks))


def _parallel_map(fn, tasks: list):
    """Order-preserving map over independent pure tasks."""
    with ThreadPoolExecutor(max_workers=_pool_size(len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# -- simple baselines --


def uniform_design(grid, n_sensors: int, seed: int) -> SensorDesign:
    """Sensors drawn uniformly without replacement from the candidate grid."""
    grid = _as_points(grid, what="candidate grid")
    if not 1 <= n_sensors <= grid.shape[0]:
        raise InputError(
            f"cannot place {n_sensors} sensors on a grid of {grid.shape[0]} points"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(grid.shape[0], size=n_sensors, replace=False)
    return SensorDesign(
        locations=grid[np.sort(chosen)], strategy="uniform", seed=seed
    )


def lhs_design(grid, n_sensors: int, seed: int) -> SensorDesign:
    """Latin hypercube sample over the grid bounding box, snapped to the grid.

    Each axis is split into ``n_sensors`` strata and every stratum is hit
    exactly once; snapping collisions fall back to the nearest unused point.
    """
    grid = _as_points(grid, what="candidate grid")
    if not 1 <= n_sensors <= grid.shape[0]:
        raise InputError(
            f"cannot place {n_sensors} sensors on a grid of {grid.shape[0]} points"
        )
    rng = np.random.default_rng(seed)
    raw = _lhs_points(grid, n_sensors, rng)
    indices = _snap_to_grid(grid, raw, set())
    return SensorDesign(locations=grid[indices], strategy="lhs", seed=seed)


def _lhs_points(grid: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Pre-snap LHS sample: one point per stratum on every axis."""
    lo = grid.min(axis=0)
    span = np.where(grid.max(axis=0) - lo > 0.0, grid.max(axis=0) - lo, 1.0)
    unit = np.empty((n, grid.shape[1]))
    for axis in range(grid.shape[1]):
        strata = rng.permutation(n)
        unit[:, axis] = (strata + rng.uniform(size=n)) / n
    return lo + unit * span


# -- kernel coordinate rescaling --


def _spatial_to_unit(kernel: Kernel, transform: BoxTransform) -> Kernel:
    lengthscales = np.asarray(kernel.lengthscales, dtype=float) / transform.scale
    return type(kernel)(kernel.variance, lengthscales)


def _spatial_from_unit(kernel: Kernel, transform: BoxTransform) -> Kernel:
    lengthscales = np.asarray(kernel.lengthscales, dtype=float) * transform.scale
    return type(kernel)(kernel.variance, lengthscales)


def _require_separable(kernel: Kernel) -> Separable:
    if not isinstance(kernel, Separable):
        raise InputError("design strategies need a Separable spatiotemporal kernel")
    if not _objectives.supports_kernel(kernel):
        raise InputError(
            "kernel is outside the differentiable family "
            "(Matern spatial part, Matern or quasi-periodic temporal part)"
        )
    return kernel


def _check_gradient(objective, theta: np.ndarray, fd_step: float) -> float:
    _, grad = objective.value_and_grad(theta)
    grad = np.asarray(grad, dtype=float)
    reference = finite_diff_grad(lambda t: float(objective.value(t)), theta, fd_step)
    denom = max(float(np.linalg.norm(reference)), 1e-12)
    rel = float(np.linalg.norm(grad - reference)) / denom
    if rel > GRADIENT_CHECK_TOL:
        raise OptimizationError(
            f"gradient disagrees with central differences (relative error {rel:.3e})"
        )
    return rel


# -- main strategy --


def mil_design(
    data: GridDataset,
    kernel: Separable,
    n_sensors: int,
    *,
    fixed=None,
    sigma2: float | None = None,
    config: OptimizerConfig | None = None,
) -> tuple[SensorDesign, FitResult]:
    """Sensor locations by minimum information loss.

    Fits the sparse variational spatiotemporal GP to ``data`` with
    ``n_sensors`` inducing points, optimizing inducing locations jointly
    with hyperparameters (unless ``config.fit_hyperparameters`` is off),
    then snaps the free locations to the candidate grid. ``fixed`` rows
    must be grid points; they are kept verbatim and listed first in the
    returned design.
    """
    kernel = _require_separable(kernel)
    config = config or OptimizerConfig()
    grid = data.spatial_locations
    if not 1 <= n_sensors <= grid.shape[0]:
        raise InputError(
            f"cannot place {n_sensors} sensors on a grid of {grid.shape[0]} points"
        )

    if fixed is None:
        fixed_raw = np.zeros((0, grid.shape[1]))
        fixed_idx = np.zeros(0, dtype=int)
    else:
        fixed_raw = _as_points(fixed, what="fixed locations")
        fixed_idx = _match_rows(grid, fixed_raw, what="fixed location")
    n_free = n_sensors - fixed_raw.shape[0]
    if n_free < 0:
        raise InputError(
            f"{fixed_raw.shape[0]} fixed locations exceed the budget of {n_sensors}"
        )

    transform = BoxTransform.from_points(grid)
    grid_unit = transform.to_unit(grid)
    fixed_unit = grid_unit[fixed_idx]
    kernel_unit = Separable(_spatial_to_unit(kernel.spatial, transform), kernel.temporal)

    observed = data.values[data.mask]
    if observed.size == 0:
        raise InputError("dataset has no observed values")
    if sigma2 is None:
        sigma2 = max(0.05 * float(np.var(observed)), 1e-6)
    if sigma2 <= 0.0:
        raise InputError(f"sigma2 must be positive, got {sigma2}")

    objective = _objectives.build_elbo_objective(
        kernel_unit,
        grid_unit,
        data.values,
        data.mask,
        data.dt,
        fixed_unit,
        n_free,
        sigma2,
        fit_hyperparameters=config.fit_hyperparameters,
        min_separation=config.min_separation,
        separation_weight=config.separation_weight,
    )

    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)

    def _restart_theta0(seq) -> np.ndarray:
        rng = np.random.default_rng(seq)
        if n_free > 0:
            init = _kmeans_init(grid_unit, n_free, rng)
            init = init + rng.normal(scale=1e-3, size=init.shape)
        else:
            init = np.zeros((0, grid.shape[1]))
        return objective.initial_theta(init)

    gradient_error = None
    if n_free == 0 and not config.fit_hyperparameters:
        # Nothing to optimize: fixed locations with frozen hyperparameters.
        theta = objective.initial_theta(np.zeros((0, grid.shape[1])))
        value = float(objective.value(theta))
        trace, best_restart = np.asarray([value]), 0
    else:
        if config.check_gradient:
            gradient_error = _check_gradient(
                objective, _restart_theta0(seeds[0]), config.fd_step
            )

        def run_restart(task):
            restart, seq = task
            theta_r, value_r, trace_r = maximize(
                objective.value_and_grad, _restart_theta0(seq), config
            )
            return value_r, theta_r, trace_r, restart

        results = _parallel_map(run_restart, list(enumerate(seeds)))
        value, theta, trace, best_restart = max(results, key=lambda r: (r[0], -r[3]))
    free_unit, sigma2_fit, kernel_fit_unit = objective.unpack(theta)

    taken = set(int(i) for i in fixed_idx)
    if n_free > 0:
        free_idx = _snap_to_grid(grid_unit, free_unit, taken)
        snap_shift = float(
            np.max(np.linalg.norm(grid_unit[free_idx] - free_unit, axis=1))
        )
    else:
        free_idx = np.zeros(0, dtype=int)
        snap_shift = 0.0

    if config.refit_after_snap and config.fit_hyperparameters:
        refit = _objectives.build_elbo_objective(
            kernel_fit_unit,
            grid_unit,
            data.values,
            data.mask,
            data.dt,
            grid_unit[np.concatenate([fixed_idx, free_idx])],
            0,
            sigma2_fit,
            fit_hyperparameters=True,
            min_separation=config.min_separation,
            separation_weight=config.separation_weight,
        )
        theta2, _, trace2 = maximize(
            refit.value_and_grad, refit.initial_theta(np.zeros((0, grid.shape[1]))), config
        )
        _, sigma2_fit, kernel_fit_unit = refit.unpack(theta2)
        trace = np.concatenate([trace, trace2])

    indices = np.concatenate([fixed_idx, free_idx])
    locations = np.vstack([fixed_raw, grid[free_idx]])
    fixed_mask = np.zeros(n_sensors, dtype=bool)
    fixed_mask[: fixed_idx.size] = True
    design = SensorDesign(
        locations=locations, fixed=fixed_mask, strategy="mil", seed=config.seed
    )

    kernel_fit = Separable(
        _spatial_from_unit(kernel_fit_unit.spatial, transform), kernel_fit_unit.temporal
    )
    model = StGpModel(
        kernel=kernel_fit,
        inducing=InducingSet(grid[indices], fixed=fixed_mask),
        spatial_grid=grid,
        time_grid=data.times,
        sigma2=sigma2_fit,
    )
    posterior = st_fit_posterior(model, data)
    fit = FitResult(
        model=model,
        posterior=posterior,
        transform=transform,
        objective_trace=trace,
        provenance={
            "strategy": "mil",
            "seed": config.seed,
            "restarts": config.restarts,
            "best_restart": best_restart,
            "pre_snap_objective": float(value),
            "snap_shift": snap_shift,
            "gradient_check": gradient_error,
        },
    )
    return design, fit


# -- entropy and variance baselines --


def _hull_projector(hull: DomainHull, n_points: int):
    def project(theta: np.ndarray) -> np.ndarray:
        pts = theta.reshape(n_points, 2)
        return np.stack([hull_project(hull, p) for p in pts]).reshape(-1)

    return project


def mes_design(
    data: GridDataset,
    kernel: Separable,
    n_add: int,
    init,
    *,
    sigma2: float,
    hull: DomainHull | None = None,
    config: OptimizerConfig | None = None,
) -> tuple[SensorDesign, dict]:
    """Greedy-free entropy placement: maximize log det of the predictive
    spatial covariance at the design.

    ``init`` rows are existing sensors (kept fixed); ``n_add`` new
    locations are optimized by projected gradient ascent, every iterate
    projected back into ``hull`` (convex hull of the grid by default).
    Returns the design and an info dict with the accepted iterate path.
    """
    kernel = _require_separable(kernel)
    config = config or OptimizerConfig()
    if n_add < 1:
        raise InputError("n_add must be at least 1")
    grid = data.spatial_locations
    init_raw = _as_points(init, what="existing locations")
    init_idx = _match_rows(grid, init_raw, what="existing location")

    transform = BoxTransform.from_points(grid)
    grid_unit = transform.to_unit(grid)
    kernel_unit = Separable(_spatial_to_unit(kernel.spatial, transform), kernel.temporal)
    hull_unit = (
        convex_hull(grid_unit)
        if hull is None
        else DomainHull(transform.to_unit(hull.vertices))
    )

    model = StGpModel(
        kernel=kernel_unit,
        inducing=InducingSet(grid_unit[init_idx]),
        spatial_grid=grid_unit,
        time_grid=data.times,
        sigma2=sigma2,
    )
    data_unit = GridDataset(
        spatial_locations=grid_unit,
        times=data.times,
        values=data.values,
        mask=data.mask,
    )
    posterior = st_fit_posterior(model, data_unit)
    cov_mean = posterior.covs.mean(axis=0)

    objective = _objectives.build_mes_objective(
        kernel_unit, grid_unit[init_idx], cov_mean, grid_unit[init_idx], n_add
    )
    project = _hull_projector(hull_unit, n_add)

    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)

    def run_restart(task):
        restart, seq = task
        rng = np.random.default_rng(seq)
        init_new = _kmeans_init(grid_unit, n_add, rng)
        init_new = init_new + rng.normal(scale=1e-3, size=init_new.shape)
        path: list[np.ndarray] = []
        theta, value, trace = maximize(
            objective.value_and_grad,
            init_new.reshape(-1),
            config,
            project=project,
            on_accept=lambda t: path.append(t.reshape(n_add, 2).copy()),
        )
        return value, theta, trace, np.asarray(path), restart

    results = _parallel_map(run_restart, list(enumerate(seeds)))
    value, theta, trace, path, best_restart = max(
        results, key=lambda r: (r[0], -r[4])
    )

    new_unit = theta.reshape(n_add, 2)
    new_idx = _snap_to_grid(grid_unit, new_unit, set(int(i) for i in init_idx))
    locations = np.vstack([init_raw, grid[new_idx]])
    fixed_mask = np.zeros(locations.shape[0], dtype=bool)
    fixed_mask[: init_raw.shape[0]] = True
    design = SensorDesign(
        locations=locations, fixed=fixed_mask, strategy="mes", seed=config.seed
    )
    info = {
        "objective": float(value),
        "trace": trace,
        "path_unit": path,
        "path": np.asarray([transform.from_unit(p) for p in path]),
        "hull": hull
        if hull is not None
        else DomainHull(transform.from_unit(hull_unit.vertices)),
        "best_restart": best_restart,
    }
    return design, info


def imse_design(
    data: GridDataset,
    kernel: Separable,
    n_add: int,
    init,
    *,
    sigma2: float,
    prediction_grid=None,
    config: OptimizerConfig | None = None,
) -> tuple[SensorDesign, dict]:
    """Minimize summed posterior predictive variance over the grid.

    The candidate design observes (noisily) at every step of the data
    window; observed values never enter, only geometry. New locations
    are optimized by projected gradient descent inside the grid hull and
    snapped to the grid.
    """
    kernel = _require_separable(kernel)
    config = config or OptimizerConfig()
    if n_add < 1:
        raise InputError("n_add must be at least 1")
    if sigma2 <= 0.0:
        raise InputError(f"sigma2 must be positive, got {sigma2}")
    grid = data.spatial_locations
    init_raw = _as_points(init, what="existing locations")
    init_idx = _match_rows(grid, init_raw, what="existing location")
    pred = grid if prediction_grid is None else _as_points(
        prediction_grid, what="prediction grid"
    )

    transform = BoxTransform.from_points(grid)
    grid_unit = transform.to_unit(grid)
    pred_unit = transform.to_unit(pred)
    kernel_unit = Separable(_spatial_to_unit(kernel.spatial, transform), kernel.temporal)
    hull_unit = convex_hull(grid_unit)

    objective = _objectives.build_imse_objective(
        kernel_unit,
        pred_unit,
        grid_unit[init_idx],
        n_add,
        data.dt,
        data.n_times,
        sigma2,
    )
    project = _hull_projector(hull_unit, n_add)

    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)

    def run_restart(task):
        restart, seq = task
        rng = np.random.default_rng(seq)
        init_new = _kmeans_init(grid_unit, n_add, rng)
        init_new = init_new + rng.normal(scale=1e-3, size=init_new.shape)
        theta, value, trace = maximize(
            objective.value_and_grad, init_new.reshape(-1), config, project=project
        )
        return value, theta, trace, restart

    results = _parallel_map(run_restart, list(enumerate(seeds)))
    value, theta, trace, best_restart = max(results, key=lambda r: (r[0], -r[3]))

    new_unit = theta.reshape(n_add, 2)
    new_idx = _snap_to_grid(grid_unit, new_unit, set(int(i) for i in init_idx))
    locations = np.vstack([init_raw, grid[new_idx]])
    fixed_mask = np.zeros(locations.shape[0], dtype=bool)
    fixed_mask[: init_raw.shape[0]] = True
    design = SensorDesign(
        locations=locations, fixed=fixed_mask, strategy="imse", seed=config.seed
    )
    info = {
        "integrated_variance": -float(value),
        "trace": trace,
        "best_restart": best_restart,
    }
    return design, info


# -- subset selection --


def sensor_removal(
    data: GridDataset,
    kernel: Separable,
    design: SensorDesign,
    n_remove: int,
    *,
    sigma2: float,
    max_subsets: int = MAX_REMOVAL_SUBSETS,
) -> tuple[SensorDesign, list[tuple[tuple[int, ...], float]]]:
    """Best subset after removing ``n_remove`` free sensors, by exhaustive
    evaluation of the collapsed bound.

    Fixed sensors are always kept. Returns the winning design and the
    full table of (kept indices, bound value), in enumeration order.
    Raises when the number of subsets exceeds ``max_subsets``.
    """
    if not isinstance(design, SensorDesign):
        design = SensorDesign(locations=design)
    n = design.n_sensors
    if not 0 <= n_remove < n:
        raise InputError(f"cannot remove {n_remove} of {n} sensors")
    removable = np.flatnonzero(~design.fixed)
    if n_remove > removable.size:
        raise InputError(
            f"cannot remove {n_remove} sensors: only {removable.size} are free"
        )
    n_subsets = math.comb(removable.size, n_remove)
    if n_subsets > max_subsets:
        raise InputError(
            f"{n_subsets} subsets exceed the enumeration cap of {max_subsets}"
        )

    def score_kept(kept: tuple[int, ...]) -> tuple[tuple[int, ...], float]:
        model = StGpModel(
            kernel=kernel,
            inducing=InducingSet(design.locations[list(kept)]),
            spatial_grid=data.spatial_locations,
            time_grid=data.times,
            sigma2=sigma2,
        )
        return kept, st_elbo(model, data)

    subsets = [
        tuple(sorted(set(range(n)) - set(removed)))
        for removed in combinations(removable.tolist(), n_remove)
    ]
    scores = _parallel_map(score_kept, subsets)
    kept, _ = max(scores, key=lambda item: item[1])
    kept_arr = np.asarray(kept, dtype=int)
    result = SensorDesign(
        locations=design.locations[kept_arr],
        fixed=design.fixed[kept_arr],
        strategy="removal",
        seed=design.seed,
    )
    return result, scores


# -- scalar utilities --


def gaussian_eig(prior_cov: np.ndarray, posterior_cov: np.ndarray) -> float:
    """Expected information gain between two Gaussians with shared mean:
    half the log-determinant ratio of prior to posterior covariance."""
    prior = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    post = np.atleast_2d(np.asarray(posterior_cov, dtype=float))
    if prior.shape != post.shape or prior.shape[0] != prior.shape[1]:
        raise InputError(
            f"covariances must be square and same shape, got {prior.shape} and {post.shape}"
        )
    try:
        lp, _ = chol_psd(prior, what="prior covariance")
        lq, _ = chol_psd(post, what="posterior covariance")
    except NumericalError as exc:
        raise InputError(str(exc)) from exc
    return 0.5 * (logdet_from_chol(lp) - logdet_from_chol(lq))


def _spatial_cov(kernel: Kernel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if isinstance(kernel, Separable):
        return kernel.temporal.variance * kernel_matrix(kernel.spatial, a, b)
    return kernel_matrix(kernel, a, b)


def utility(
    kind: str,
    kernel: Kernel,
    design_locations,
    *,
    sigma2: float | None = None,
    test_locations=None,
) -> float:
    """Scalar design utilities on a single spatial slice.

    ``mes`` is the prior entropy term (log det of the design covariance);
    ``d_opt`` and ``imse`` condition on noisy observations at the design
    and need ``sigma2`` and ``test_locations``.
    """
    design = _as_points(design_locations, what="design locations")
    if kind == "mes":
        cov = _spatial_cov(kernel, design, design)
        l, _ = chol_psd(cov, what="design covariance")
        return logdet_from_chol(l)
    if kind not in ("d_opt", "imse"):
        raise InputError(f"unknown utility {kind!r}")
    if sigma2 is None or sigma2 <= 0.0:
        raise InputError(f"utility {kind!r} needs a positive sigma2")
    if test_locations is None:
        raise InputError(f"utility {kind!r} needs test_locations")
    test = _as_points(test_locations, what="test locations")
    ktt = _spatial_cov(kernel, test, test)
    ktd = _spatial_cov(kernel, test, design)
    kdd = _spatial_cov(kernel, design, design) + sigma2 * np.eye(design.shape[0])
    l, _ = chol_psd(kdd, what="design covariance")
    half = np.linalg.solve(l, ktd.T)
    post = ktt - half.T @ half
    if kind == "d_opt":
        lp, _ = chol_psd(post, what="posterior covariance")
        return logdet_from_chol(lp)
    return -float(np.trace(post))
