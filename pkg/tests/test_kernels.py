"""Closed-form values, state-space discretization, and serialization."""

import math

import numpy as np
import pytest

from milsense import (
    InputError,
    Matern12,
    Matern32,
    Matern52,
    Product,
    QuasiPeriodicMatern32,
    Separable,
    Sum,
    UnsupportedKernelError,
    eval_kernel,
    kernel_from_dict,
    kernel_matrix,
    kernel_to_dict,
    to_state_space,
)


def matern12_value(var, ell, r):
    return var * math.exp(-r / ell)


def matern32_value(var, ell, r):
    s = math.sqrt(3.0) * r / ell
    return var * (1.0 + s) * math.exp(-s)


def matern52_value(var, ell, r):
    s = math.sqrt(5.0) * r / ell
    return var * (1.0 + s + s * s / 3.0) * math.exp(-s)


def emitted_lag_cov(sde, a, lag_steps):
    """H A^k Pinf H' for one discretized temporal kernel."""
    out = sde.Pinf
    for _ in range(lag_steps):
        out = a @ out
    return float((sde.H @ out @ sde.H.T).item())


def test_single_point_values():
    assert eval_kernel(Matern12(2.0, [1.0]), [0.3], [0.3]) == pytest.approx(2.0)
    assert eval_kernel(Matern12(1.0, [1.0]), [0.0], [1.0]) == pytest.approx(
        math.exp(-1.0), abs=1e-12
    )


def test_separable_is_a_product_of_factors():
    kern = Separable(Matern12(1.0, [1.0, 1.0]), Matern12(1.0, [1.0]))
    a = [0.0, 0.0, 0.0]
    b = [math.log(2.0), 0.0, math.log(5.0)]     # spatial 0.5, temporal 0.2
    assert eval_kernel(kern, a, b) == pytest.approx(0.1, abs=1e-12)
    assert eval_kernel(kern, a, b) == pytest.approx(eval_kernel(kern, b, a))
    assert eval_kernel(kern, a, a) == pytest.approx(kern.variance)


def test_gram_matrix_single_point():
    got = kernel_matrix(Matern32(3.0, [1.0, 1.0]), np.array([[0.2, 0.7]]))
    np.testing.assert_allclose(got, [[3.0]])


def test_gram_matrix_of_duplicated_point_is_rank_one():
    pts = np.array([[0.4, 0.1], [0.4, 0.1]])
    got = kernel_matrix(Matern52(1.7, [0.5, 0.5]), pts)
    np.testing.assert_allclose(got, np.full((2, 2), 1.7))
    assert np.linalg.matrix_rank(got) == 1


def test_gram_matrix_symmetric_and_near_psd():
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(20, 2))
    for kern in (Matern12(1.3, [0.3, 0.6]), Matern32(0.7, [0.2, 0.2]), Matern52(2.0, [0.5, 0.5])):
        gram = kernel_matrix(kern, pts)
        assert np.array_equal(gram, gram.T)
        eigs = np.linalg.eigvalsh(gram)
        assert eigs.min() >= -1e-8 * np.trace(gram)


def test_point_validation():
    kern = Matern32(1.0, [1.0, 1.0])
    with pytest.raises(InputError):
        kernel_matrix(kern, np.zeros((0, 2)))
    with pytest.raises(InputError):
        kernel_matrix(kern, np.zeros((3, 5)))
    with pytest.raises(InputError):
        eval_kernel(kern, [0.0], [0.0])


def test_zero_step_discretization_is_identity():
    for kern in (Matern12(1.0, [2.0]), Matern32(1.5, [1.0]), Matern52(0.5, [3.0])):
        sde, a, q = to_state_space(kern, 0.0)
        np.testing.assert_allclose(a, np.eye(sde.state_dim), atol=1e-12)
        np.testing.assert_allclose(q, 0.0, atol=1e-12)


def test_matern12_discretization_closed_form():
    sde, a, q = to_state_space(Matern12(1.0, [2.0]), 0.7)
    np.testing.assert_allclose(a, [[math.exp(-0.35)]], atol=1e-12)
    np.testing.assert_allclose(q, [[1.0 - math.exp(-0.7)]], atol=1e-12)
    assert float((sde.H @ sde.Pinf @ sde.H.T).item()) == pytest.approx(1.0)


def test_matern32_reconstruction_at_half_step():
    kern = Matern32(1.0, [1.0])
    sde, a, _ = to_state_space(kern, 0.5)
    for k, lag in enumerate([0.0, 0.5, 1.0]):
        want = eval_kernel(kern, [0.0], [lag])
        assert emitted_lag_cov(sde, a, k) == pytest.approx(want, abs=1e-8)


TEMPORAL_FAMILIES = [
    lambda var, ell: Matern12(var, [ell]),
    lambda var, ell: Matern32(var, [ell]),
    lambda var, ell: Matern52(var, [ell]),
    lambda var, ell: QuasiPeriodicMatern32(var, [ell], period=3.0 * ell),
    lambda var, ell: Sum([Matern32(var, [ell]), Matern12(0.5 * var, [4.0 * ell])]),
]


@pytest.mark.parametrize("make", TEMPORAL_FAMILIES)
def test_discretization_reconstructs_kernel(make):
    rng = np.random.default_rng(7)
    for _ in range(10):
        var = float(rng.uniform(0.3, 3.0))
        ell = float(rng.uniform(0.5, 5.0))
        dt = float(rng.uniform(0.05, 1.5))
        kern = make(var, ell)
        sde, a, _ = to_state_space(kern, dt)
        for k in range(21):
            want = eval_kernel(kern, [0.0], [k * dt])
            got = emitted_lag_cov(sde, a, k)
            assert got == pytest.approx(want, abs=1e-8 * max(1.0, kern.variance))


def test_sum_state_space_stacks_components():
    parts = [Matern32(1.0, [2.0]), Matern12(0.4, [10.0])]
    total = Sum(parts)
    sde, a, _ = to_state_space(total, 0.8)
    assert sde.state_dim == sum(p.to_sde().state_dim for p in parts)
    for k in range(6):
        lag = 0.8 * k
        want = sum(eval_kernel(p, [0.0], [lag]) for p in parts)
        assert emitted_lag_cov(sde, a, k) == pytest.approx(want, abs=1e-8)
        assert eval_kernel(total, [0.0], [lag]) == pytest.approx(want, abs=1e-12)


def test_quasiperiodic_closed_form():
    kern = QuasiPeriodicMatern32(0.9, [4.0], period=7.0)
    for r in (0.0, 0.5, 1.7, 3.5, 7.0, 10.2):
        want = math.cos(2.0 * math.pi * r / 7.0) * matern32_value(0.9, 4.0, r)
        assert eval_kernel(kern, [0.0], [r]) == pytest.approx(want, abs=1e-12)


def test_product_temporal_has_no_state_space():
    kern = Product([Matern32(1.0, [1.0]), Matern32(1.0, [5.0])])
    with pytest.raises(UnsupportedKernelError):
        to_state_space(kern, 1.0)


def test_serialization_round_trip():
    kernels = [
        Matern12(0.5, [1.5]),
        Matern32(2.0, [0.3, 0.7]),
        Matern52(1.0, [2.0]),
        QuasiPeriodicMatern32(0.8, [3.0], period=12.0),
        Sum([Matern32(1.0, [2.0]), Matern12(0.4, [10.0])]),
        Product([Matern32(1.0, [1.0]), Matern12(1.0, [2.0])]),
        Separable(Matern32(1.0, [0.2, 0.2]), Matern32(1.0, [8.0])),
    ]
    for kern in kernels:
        spec = kernel_to_dict(kern)
        back = kernel_from_dict(spec)
        assert type(back) is type(kern)
        np.testing.assert_allclose(back.log_params(), kern.log_params())
        assert kernel_to_dict(back) == spec


def test_serialization_rejects_unknown_variant():
    with pytest.raises(InputError):
        kernel_from_dict({"variant": "Gaussian", "variance": 1.0, "lengthscales": [1.0]})
