"""Prediction metrics, calibration curves, and design matching."""

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milsense import (
    InputError,
    calibration,
    design_distance,
    evaluate_predictions,
    extreme_error_rate,
    npll,
    rmse,
)
from milsense.evalsuite import DEFAULT_LEVELS


def random_case(seed, shape=(7, 5)):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=shape)
    truth = pred + rng.normal(size=shape)
    var = rng.uniform(0.2, 3.0, size=shape)
    mask = rng.uniform(size=shape) < 0.8
    mask[0, 0] = True  # keep at least one entry
    return pred, var, truth, mask


# -- rmse --


def test_rmse_exact_values():
    truth = np.zeros((2, 2))
    assert rmse(np.zeros((2, 2)), truth) == 0.0
    pred = np.array([[1.0, -1.0], [1.0, -1.0]])
    assert rmse(pred, truth) == 1.0


def test_rmse_matches_loop():
    pred, _, truth, mask = random_case(0)
    total, n = 0.0, 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if mask[i, j]:
                total += (pred[i, j] - truth[i, j]) ** 2
                n += 1
    np.testing.assert_allclose(rmse(pred, truth, mask), math.sqrt(total / n), rtol=1e-12)


# -- npll --


def test_npll_exact_values():
    x = np.zeros((3, 2))
    assert abs(npll(x, np.ones_like(x), x) - 0.5 * math.log(2 * math.pi)) < 1e-12
    err, var = 0.7, 0.3
    want = 0.5 * (math.log(2 * math.pi * var) + err**2 / var)
    got = npll(x, np.full_like(x, var), x + err)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_npll_matches_loop():
    pred, var, truth, mask = random_case(1)
    total, n = 0.0, 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if mask[i, j]:
                e = truth[i, j] - pred[i, j]
                total += 0.5 * (math.log(2 * math.pi * var[i, j]) + e * e / var[i, j])
                n += 1
    np.testing.assert_allclose(npll(pred, var, truth, mask), total / n, rtol=1e-12)


def test_npll_prefers_the_true_noise_scale():
    rng = np.random.default_rng(2)
    pred = np.zeros((100, 50))
    truth = 0.5 * rng.standard_normal(pred.shape)
    right = npll(pred, np.full_like(pred, 0.25), truth)
    assert right < npll(pred, np.full_like(pred, 4.0), truth)
    assert right < npll(pred, np.full_like(pred, 0.01), truth)


def test_npll_rejects_zero_variance():
    x = np.zeros((2, 2))
    with pytest.raises(InputError, match="positive"):
        npll(x, np.zeros_like(x), x)


# -- calibration --


def test_calibration_degenerate_area():
    # Truth exactly at the mean: every interval covers, so the empirical
    # curve is flat at 1 and the area is the trapezoid of |1 - level|.
    x = np.zeros((4, 3))
    curve, area = calibration(x, np.ones_like(x), x)
    np.testing.assert_array_equal(curve[:, 0], DEFAULT_LEVELS)
    np.testing.assert_array_equal(curve[:, 1], 1.0)
    np.testing.assert_allclose(area, 0.45, atol=1e-12)


def test_calibration_perfect_predictions():
    rng = np.random.default_rng(3)
    var = rng.uniform(0.1, 2.0, size=(100, 100))
    pred = rng.normal(size=var.shape)
    truth = pred + np.sqrt(var) * rng.standard_normal(var.shape)
    curve, area = calibration(pred, var, truth)
    assert area <= 0.02
    assert np.all(np.diff(curve[:, 1]) >= 0.0)
    assert curve.shape == (DEFAULT_LEVELS.size, 2)


def test_calibration_rejects_bad_levels():
    x = np.zeros((2, 2))
    v = np.ones_like(x)
    for levels in ([0.0, 0.5], [0.5, 0.5], [0.9, 0.1], [1.0]):
        with pytest.raises(InputError, match="levels"):
            calibration(x, v, x, levels=np.array(levels))


# -- extreme errors --


def test_extreme_error_rate_exact():
    truth = np.zeros((4, 3))
    assert np.all(extreme_error_rate(truth, truth) == 0.0)
    pred = np.full((4, 3), 2.0)
    assert np.all(extreme_error_rate(pred, truth, 1.0) == 1.0)


def test_extreme_error_rate_matches_loop_and_nan():
    pred, _, truth, mask = random_case(4, shape=(9, 4))
    mask[:, 2] = False
    rates = extreme_error_rate(pred, truth, 0.8, mask)
    for j in range(pred.shape[1]):
        hits, n = 0, 0
        for i in range(pred.shape[0]):
            if mask[i, j]:
                n += 1
                hits += abs(pred[i, j] - truth[i, j]) > 0.8
        if n == 0:
            assert np.isnan(rates[j])
        else:
            np.testing.assert_allclose(rates[j], hits / n, rtol=1e-12)


# -- design matching --


def brute_force_distance(a, b):
    """Minimum total distance over every assignment, sizes differing by <= 1."""
    if len(a) < len(b):
        return brute_force_distance(b, a)
    best = math.inf
    for perm in itertools.permutations(range(len(a)), len(b)):
        total = sum(np.linalg.norm(a[i] - b[j]) for j, i in enumerate(perm))
        best = min(best, total)
    return best


def test_design_distance_identical_and_swapped():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 2))
    match = design_distance(a, a)
    assert match.total_distance == 0.0
    assert match.unmatched is None
    swapped = a[[1, 0, 2, 3, 4, 5]]
    match = design_distance(a, swapped)
    np.testing.assert_allclose(match.total_distance, 0.0, atol=1e-12)
    assert (0, 1) in match.pairs and (1, 0) in match.pairs


def test_design_distance_matches_brute_force():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(5, 2))
    b = rng.normal(size=(5, 2))
    match = design_distance(a, b)
    np.testing.assert_allclose(match.total_distance, brute_force_distance(a, b), rtol=1e-10)
    worst = max(match.pairs, key=lambda ij: np.linalg.norm(a[ij[0]] - b[ij[1]]))
    assert match.most_displaced == worst


def test_design_distance_one_extra_point():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 2))
    b = rng.normal(size=(4, 2))
    match = design_distance(a, b)
    np.testing.assert_allclose(match.total_distance, brute_force_distance(a, b), rtol=1e-10)
    assert match.unmatched is not None and match.unmatched[0] == "a"
    matched_a = {i for i, _ in match.pairs}
    assert match.unmatched[1] not in matched_a
    with pytest.raises(InputError, match="at most one"):
        design_distance(a, b[:3])


coords = st.floats(-10.0, 10.0, allow_nan=False)


@st.composite
def equal_size_designs(draw):
    n = draw(st.integers(1, 4))
    def pts():
        return np.array([[draw(coords), draw(coords)] for _ in range(n)])
    return pts(), pts(), pts()


@settings(max_examples=100, deadline=None)
@given(equal_size_designs())
def test_design_distance_is_a_metric(designs):
    a, b, c = designs
    d_ab = design_distance(a, b).total_distance
    d_ba = design_distance(b, a).total_distance
    d_ac = design_distance(a, c).total_distance
    d_bc = design_distance(b, c).total_distance
    np.testing.assert_allclose(d_ab, d_ba, rtol=1e-9, atol=1e-12)
    assert d_ac <= d_ab + d_bc + 1e-9 * max(1.0, d_ab + d_bc)


# -- report assembly --


def test_location_permutation_invariance():
    pred, var, truth, mask = random_case(8)
    perm = np.random.default_rng(9).permutation(pred.shape[1])
    r0 = evaluate_predictions(pred, var, truth, mask)
    r1 = evaluate_predictions(pred[:, perm], var[:, perm], truth[:, perm], mask[:, perm])
    assert r1.rmse == r0.rmse
    assert r1.npll == r0.npll
    assert r1.miscalibration_area == r0.miscalibration_area
    np.testing.assert_array_equal(r1.extreme_error_rate, r0.extreme_error_rate[perm])


def test_report_json_round_trip():
    pred, var, truth, mask = random_case(10)
    mask[:, 3] = False  # force a NaN rate to exercise null handling
    report = evaluate_predictions(pred, var, truth, mask, metadata={"tag": "unit"})
    back = json.loads(report.to_json())
    assert back == json.loads(json.dumps(report.to_dict()))
    assert back["rmse"] == report.rmse
    assert back["n_evaluated"] == int(mask.sum())
    assert back["extreme_error_rate"][3] is None
    assert back["metadata"] == {"tag": "unit"}


def test_shape_and_mask_validation():
    x = np.zeros((2, 2))
    with pytest.raises(InputError, match="shape"):
        rmse(x, np.zeros((2, 3)))
    with pytest.raises(InputError, match="no entries"):
        rmse(x, x, np.zeros_like(x, dtype=bool))
    with pytest.raises(InputError, match="non-negative"):
        evaluate_predictions(x, -np.ones_like(x), x)
