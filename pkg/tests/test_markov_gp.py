"""Filter/smoother equivalence with dense GP regression."""

import math

import numpy as np
import pytest

from milsense import (
    Matern12,
    Matern32,
    StateSpaceModel,
    kalman_filter,
    rts_smoother,
    sample_prior,
    to_state_space,
)

from conftest import dense_log_marginal, dense_posterior


def temporal_model(kernel, n_steps, dt, sigma2):
    sde, a, q = to_state_space(kernel, dt)
    return StateSpaceModel(A=a, Q=q, H=sde.H, P0=sde.Pinf, obs_noise=sigma2)


def test_single_scalar_observation_log_density():
    model = StateSpaceModel(
        A=np.eye(1), Q=np.zeros((1, 1)), H=np.eye(1), P0=np.eye(1), obs_noise=0.1
    )
    got = kalman_filter(model, np.array([[0.5]])).log_marginal_likelihood
    want = -0.5 * (math.log(2.0 * math.pi * 1.1) + 0.25 / 1.1)
    assert got == pytest.approx(want, abs=1e-12)


def test_all_missing_gives_zero_log_marginal():
    model = temporal_model(Matern32(1.0, [2.0]), 10, 1.0, 0.1)
    obs = np.full((10, 1), np.nan)
    filtered = kalman_filter(model, obs)
    assert filtered.log_marginal_likelihood == 0.0


def test_log_marginal_matches_dense_gp():
    rng = np.random.default_rng(3)
    times = np.arange(50) * 0.5
    kern = Matern32(1.3, [2.0])
    y = rng.standard_normal(50)
    model = temporal_model(kern, 50, 0.5, 0.2)
    got = kalman_filter(model, y[:, None]).log_marginal_likelihood
    want = dense_log_marginal(kern, times[:, None], y, 0.2)
    assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_single_step_smoother_is_identity():
    model = temporal_model(Matern12(1.0, [1.0]), 1, 1.0, 0.1)
    filtered = kalman_filter(model, np.array([[0.7]]))
    smoothed = rts_smoother(model, filtered)
    np.testing.assert_allclose(smoothed.means, filtered.means)
    np.testing.assert_allclose(smoothed.covs, filtered.covs)


def test_unobserved_chain_recovers_prior():
    kern = Matern32(1.4, [2.5])
    model = temporal_model(kern, 8, 1.0, 0.1)
    filtered = kalman_filter(model, np.full((8, 1), np.nan))
    smoothed = rts_smoother(model, filtered)
    for t in range(8):
        np.testing.assert_allclose(smoothed.means[t], 0.0, atol=1e-12)
        np.testing.assert_allclose(smoothed.covs[t], model.P0, atol=1e-9)


def test_smoothed_means_match_dense_posterior():
    rng = np.random.default_rng(5)
    times = np.arange(50) * 0.3
    kern = Matern12(0.8, [1.5])
    y = rng.standard_normal(50)
    model = temporal_model(kern, 50, 0.3, 0.15)
    smoothed = rts_smoother(model, kalman_filter(model, y[:, None]))
    emitted = smoothed.means @ model.H.T
    want_mean, want_cov = dense_posterior(kern, times[:, None], y, 0.15, times[:, None])
    np.testing.assert_allclose(emitted[:, 0], want_mean, atol=1e-6)
    got_var = np.einsum("ij,tjk,ik->t", model.H, smoothed.covs, model.H)
    np.testing.assert_allclose(got_var, np.diag(want_cov), atol=1e-6)


def test_smoothing_never_inflates_filtered_covariance():
    rng = np.random.default_rng(9)
    model = temporal_model(Matern32(1.0, [2.0]), 30, 1.0, 0.1)
    y = rng.standard_normal((30, 1))
    filtered = kalman_filter(model, y)
    smoothed = rts_smoother(model, filtered)
    for t in range(30):
        gap = np.linalg.eigvalsh(filtered.covs[t] - smoothed.covs[t])
        assert gap.min() >= -1e-9


def test_observed_steps_shrink_prior_variance():
    rng = np.random.default_rng(2)
    model = temporal_model(Matern32(1.0, [2.0]), 40, 1.0, 0.05)
    y = rng.standard_normal((40, 1))
    mask = rng.random((40, 1)) < 0.6
    filtered = kalman_filter(model, y, mask)
    prior_var = float((model.H @ model.P0 @ model.H.T).item())
    emitted_var = np.einsum("ij,tjk,ik->t", model.H, filtered.covs, model.H)
    observed = mask[:, 0]
    assert np.all(emitted_var[observed] <= prior_var + 1e-10)


def test_chained_batches_equal_single_pass():
    rng = np.random.default_rng(11)
    model = temporal_model(Matern32(1.0, [3.0]), 40, 0.7, 0.2)
    y = rng.standard_normal((40, 1))
    mask = rng.random((40, 1)) < 0.8
    full = kalman_filter(model, y, mask)
    first = kalman_filter(model, y[:17], mask[:17])
    second = kalman_filter(
        model, y[17:], mask[17:], start_state=(first.means[-1], first.covs[-1])
    )
    total = first.log_marginal_likelihood + second.log_marginal_likelihood
    assert total == pytest.approx(full.log_marginal_likelihood, abs=1e-9)
    np.testing.assert_allclose(second.means[-1], full.means[-1], atol=1e-9)
    np.testing.assert_allclose(second.covs[-1], full.covs[-1], atol=1e-9)


def test_sample_prior_with_zero_noise_is_zero():
    model = StateSpaceModel(
        A=np.eye(2), Q=np.zeros((2, 2)), H=np.eye(2)[:1], P0=np.zeros((2, 2)), obs_noise=1.0
    )
    states, emitted = sample_prior(model, 50, seed=4)
    np.testing.assert_allclose(states, 0.0)
    np.testing.assert_allclose(emitted, 0.0)


def test_sample_prior_is_deterministic():
    model = temporal_model(Matern12(1.0, [2.0]), 100, 1.0, 0.1)
    a = sample_prior(model, 100, seed=12)
    b = sample_prior(model, 100, seed=12)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_prior_matches_stationary_variance():
    kern = Matern12(1.7, [3.0])
    model = temporal_model(kern, 10_000, 1.0, 0.1)
    _, emitted = sample_prior(model, 10_000, seed=21)
    sample_var = float(np.var(emitted[:, 0]))
    assert sample_var == pytest.approx(1.7, rel=0.05)
