"""Spatiotemporal sparse GP against dense Kronecker references."""

import numpy as np
import pytest

from milsense import (
    GridDataset,
    InducingSet,
    InputError,
    Matern12,
    Matern32,
    Separable,
    StGpModel,
    StPosterior,
    build_inducing_chain,
    collapsed_elbo,
    eval_kernel,
    optimal_q,
    st_elbo,
    st_fit_posterior,
    st_predict,
    test_time_update as mean_update,
    to_state_space,
)

from conftest import dense_st_log_marginal, dense_st_sparse_fit


def make_model(data, z, sigma2=0.05, temporal=None):
    kernel = Separable(Matern32(1.0, [0.4, 0.4]), temporal or Matern32(1.0, [3.0]))
    return StGpModel(
        kernel=kernel,
        inducing=InducingSet(z),
        spatial_grid=data.spatial_locations,
        time_grid=data.times,
        sigma2=sigma2,
    )


def test_chain_with_one_inducing_point_scales_the_temporal_blocks(small_field):
    z = small_field.spatial_locations[:1]
    model = make_model(small_field, z)
    chain = build_inducing_chain(model)
    sde, a, q = to_state_space(model.kernel.temporal, model.dt)
    khat = float(model.kernel.spatial.variance)
    np.testing.assert_allclose(chain.A, a, atol=1e-12)
    np.testing.assert_allclose(chain.Q, khat * q, atol=1e-12)
    np.testing.assert_allclose(chain.P0, khat * sde.Pinf, atol=1e-12)


def test_chain_reproduces_separable_covariance(small_field):
    z = small_field.spatial_locations[[0, 5, 9]]
    temporal = Matern12(0.8, [2.0])
    model = make_model(small_field, z, temporal=temporal)
    chain = build_inducing_chain(model)
    kmm = model.kernel.spatial.matrix(z)
    # lagged cross-covariance: Cov(u_{t+k}, u_t) = H A^k P0 H'
    cov = chain.P0
    for k in range(6):
        want = eval_kernel(temporal, [0.0], [k * model.dt]) * kmm
        np.testing.assert_allclose(chain.H @ cov @ chain.H.T, want, atol=1e-8)
        cov = chain.A @ cov


def test_single_step_reduces_to_static_bound(small_field):
    data = small_field.window(0, 1)
    z = data.spatial_locations[[1, 4, 8]]
    model = make_model(data, z, sigma2=0.07)
    slice_kernel = Matern32(
        model.kernel.spatial.variance * model.kernel.temporal.variance, [0.4, 0.4]
    )
    want = collapsed_elbo(slice_kernel, data.spatial_locations, data.values[0], z, 0.07)
    assert st_elbo(model, data) == pytest.approx(want, abs=1e-8)


def test_full_inducing_grid_matches_dense_log_marginal(small_field):
    model = make_model(small_field, small_field.spatial_locations)
    got = st_elbo(model, small_field)
    want = dense_st_log_marginal(model.kernel, small_field, model.sigma2)
    assert got == pytest.approx(want, abs=1e-5 * max(1.0, abs(want)))


def test_bound_never_exceeds_dense_log_marginal(small_field):
    for pick in ([0, 5, 9], [2, 3, 7, 10]):
        model = make_model(small_field, small_field.spatial_locations[pick])
        got = st_elbo(model, small_field)
        want = dense_st_log_marginal(model.kernel, small_field, model.sigma2)
        assert got <= want + 1e-8


def test_matches_dense_sparse_reference(small_field):
    z = small_field.spatial_locations[[0, 4, 7, 11]]
    model = make_model(small_field, z)
    ref = dense_st_sparse_fit(model.kernel, small_field, z, model.sigma2)
    posterior = st_fit_posterior(model, small_field)
    field = st_predict(model, posterior, small_field.spatial_locations)

    assert st_elbo(model, small_field) == pytest.approx(ref["elbo"], abs=1e-5)
    np.testing.assert_allclose(posterior.means, ref["u_means"], atol=1e-5)
    np.testing.assert_allclose(posterior.covs, ref["u_covs"], atol=1e-5)
    np.testing.assert_allclose(field.mean, ref["pred_mean"], atol=1e-5)
    np.testing.assert_allclose(field.var, ref["pred_var"], atol=1e-5)


def test_unobserved_fit_recovers_prior(small_field):
    z = small_field.spatial_locations[[0, 6]]
    model = make_model(small_field, z)
    blank = GridDataset(
        small_field.spatial_locations,
        small_field.times,
        np.zeros_like(small_field.values),
        np.zeros_like(small_field.mask),
    )
    posterior = st_fit_posterior(model, blank)
    kappa0 = model.kernel.temporal.variance
    kmm = model.kernel.spatial.matrix(z)
    np.testing.assert_allclose(posterior.means, 0.0, atol=1e-12)
    for t in range(blank.n_times):
        np.testing.assert_allclose(posterior.covs[t], kappa0 * kmm, atol=1e-8)


def test_single_step_moments_match_static_solution(small_field):
    data = small_field.window(3, 4)
    z = data.spatial_locations[[1, 5, 9]]
    model = make_model(data, z, sigma2=0.1)
    posterior = st_fit_posterior(model, data)
    slice_kernel = Matern32(model.kernel.spatial.variance, [0.4, 0.4])
    moments = optimal_q(
        slice_kernel, data.spatial_locations, data.values[0], z, 0.1, regularize_noise=False
    )
    np.testing.assert_allclose(posterior.means[0], moments.mean, atol=1e-6)
    np.testing.assert_allclose(posterior.covs[0], moments.cov, atol=1e-6)


def test_predict_interpolates_at_inducing_points(small_field):
    z = small_field.spatial_locations[[2, 8, 10]]
    model = make_model(small_field, z)
    means = np.random.default_rng(1).standard_normal((small_field.n_times, 3))
    sharp = StPosterior(means, np.zeros((small_field.n_times, 3, 3)), elbo=0.0)
    field = st_predict(model, sharp, z)
    np.testing.assert_allclose(field.mean, means, atol=1e-8)
    np.testing.assert_allclose(field.var, 0.0, atol=1e-8)


def test_predict_prior_posterior_gives_prior_variance(small_field):
    z = small_field.spatial_locations[[0, 6, 11]]
    model = make_model(small_field, z)
    kappa0 = model.kernel.temporal.variance
    kmm = model.kernel.spatial.matrix(z)
    prior = StPosterior(
        np.zeros((small_field.n_times, 3)),
        np.broadcast_to(kappa0 * kmm, (small_field.n_times, 3, 3)).copy(),
        elbo=0.0,
    )
    field = st_predict(model, prior, small_field.spatial_locations)
    want = kappa0 * model.kernel.spatial.diag(small_field.spatial_locations)
    np.testing.assert_allclose(field.var, np.tile(want, (small_field.n_times, 1)), atol=1e-8)


def test_predict_variance_decomposition(small_field):
    z = small_field.spatial_locations[[1, 4, 9]]
    model = make_model(small_field, z)
    posterior = st_fit_posterior(model, small_field)
    field = st_predict(model, posterior, small_field.spatial_locations)
    flat = StPosterior(posterior.means, np.zeros_like(posterior.covs), posterior.elbo)
    residual = st_predict(model, flat, small_field.spatial_locations).var

    kmm = model.kernel.spatial.matrix(z)
    kms = model.kernel.spatial.matrix(z, small_field.spatial_locations)
    bstar = np.linalg.solve(kmm, kms).T
    explained = np.einsum("ij,tjk,ik->ti", bstar, posterior.covs, bstar)
    np.testing.assert_allclose(field.var - explained, residual, atol=1e-8)
    want_residual = model.kernel.temporal.variance * (
        model.kernel.spatial.diag(small_field.spatial_locations) - np.sum(kms * bstar.T, axis=0)
    )
    np.testing.assert_allclose(residual, np.tile(want_residual, (small_field.n_times, 1)), atol=1e-8)


def test_mean_update_matches_fresh_restricted_fit(small_field):
    z = small_field.spatial_locations[[0, 5, 10]]
    design = small_field.spatial_locations[[2, 6, 9]]
    design_cols = [2, 6, 9]
    model = make_model(small_field, z)
    trained = st_fit_posterior(model, small_field)

    updated = mean_update(
        model, trained, design, small_field.values[:, design_cols]
    )
    restricted_mask = np.zeros_like(small_field.mask)
    restricted_mask[:, design_cols] = True
    fresh = st_fit_posterior(
        model,
        GridDataset(
            small_field.spatial_locations,
            small_field.times,
            small_field.values,
            restricted_mask,
        ),
    )
    np.testing.assert_allclose(updated.means, fresh.means, atol=1e-9)
    np.testing.assert_allclose(updated.covs, trained.covs, atol=1e-12)
    assert updated.elbo == pytest.approx(fresh.elbo, abs=1e-8)


def test_mean_update_tracks_constant_shift(small_field):
    z = small_field.spatial_locations[[0, 5, 10]]
    design_cols = [2, 6, 9]
    design = small_field.spatial_locations[design_cols]
    model = make_model(small_field, z)
    trained = st_fit_posterior(model, small_field)
    shifted_obs = small_field.values[:, design_cols] + 2.0

    updated = mean_update(model, trained, design, shifted_obs)
    restricted_mask = np.zeros_like(small_field.mask)
    restricted_mask[:, design_cols] = True
    fresh = st_fit_posterior(
        model,
        GridDataset(
            small_field.spatial_locations,
            small_field.times,
            small_field.values + 2.0,
            restricted_mask,
        ),
    )
    np.testing.assert_allclose(updated.means, fresh.means, atol=1e-9)
    base = st_predict(model, mean_update(
        model, trained, design, small_field.values[:, design_cols]
    ), small_field.spatial_locations)
    moved = st_predict(model, updated, small_field.spatial_locations)
    shift = moved.mean - base.mean
    assert shift.min() > 0.5       # every point reacts to the +2 offset
    assert abs(shift.mean() - 2.0) < 1.0


def test_mean_update_with_no_observations_returns_prior_mean(small_field):
    z = small_field.spatial_locations[[0, 5, 10]]
    design_cols = [2, 6]
    model = make_model(small_field, z)
    trained = st_fit_posterior(model, small_field)
    updated = mean_update(
        model,
        trained,
        small_field.spatial_locations[design_cols],
        np.full((small_field.n_times, 2), np.nan),
    )
    np.testing.assert_allclose(updated.means, 0.0, atol=1e-12)


def test_mean_update_averaged_reuse(small_field):
    z = small_field.spatial_locations[[0, 5, 10]]
    design_cols = [2, 6]
    model = make_model(small_field, z)
    trained = st_fit_posterior(model, small_field)
    shorter = small_field.values[:5, design_cols]
    updated = mean_update(
        model, trained, small_field.spatial_locations[design_cols], shorter
    )
    np.testing.assert_allclose(
        updated.covs, np.tile(trained.covs.mean(axis=0), (5, 1, 1)), atol=1e-12
    )
    with pytest.raises(InputError):
        mean_update(
            model,
            trained,
            small_field.spatial_locations[design_cols],
            shorter,
            reuse="per-step",
        )


def test_off_grid_design_is_rejected(small_field):
    z = small_field.spatial_locations[[0, 5]]
    model = make_model(small_field, z)
    trained = st_fit_posterior(model, small_field)
    off = small_field.spatial_locations[[2]] + 0.01
    with pytest.raises(InputError):
        mean_update(model, trained, off, small_field.values[:, [2]])


def test_grid_mismatch_is_rejected(small_field):
    z = small_field.spatial_locations[[0, 5]]
    model = make_model(small_field, z)
    other = GridDataset(
        small_field.spatial_locations[:6],
        small_field.times,
        small_field.values[:, :6],
        small_field.mask[:, :6],
    )
    with pytest.raises(InputError):
        st_elbo(model, other)
