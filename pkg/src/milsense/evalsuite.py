"""Prediction-quality metrics and design comparison.

Metrics operate on per-entry predictive means/variances against held-out
truth, restricted by an optional mask. Calibration follows the central
Gaussian interval convention: for nominal level g the interval is
``mean +- z_{(1+g)/2} sd`` and the curve records the empirical coverage,
with the miscalibration area taken as the trapezoidal area between the
curve and the diagonal over the evaluated levels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import norm

from .errors import InputError

__all__ = [
    "EvalReport",
    "DesignMatch",
    "rmse",
    "npll",
    "calibration",
    "extreme_error_rate",
    "design_distance",
    "evaluate_predictions",
]

DEFAULT_LEVELS = np.round(np.arange(0.05, 0.951, 0.05), 10)
DEFAULT_EXTREME_THRESHOLD = 1.0


def _aligned(pred_mean, truth, mask, pred_var=None):
    pred_mean = np.asarray(pred_mean, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != pred_mean.shape:
        raise InputError(f"truth shape {truth.shape} != predictions shape {pred_mean.shape}")
    if pred_var is not None:
        pred_var = np.asarray(pred_var, dtype=float)
        if pred_var.shape != pred_mean.shape:
            raise InputError(f"variance shape {pred_var.shape} != predictions shape {pred_mean.shape}")
        if np.any(pred_var < 0.0):
            raise InputError("predictive variances must be non-negative")
    if mask is None:
        mask = np.ones(pred_mean.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred_mean.shape:
            raise InputError(f"mask shape {mask.shape} != predictions shape {pred_mean.shape}")
    if not np.any(mask):
        raise InputError("mask leaves no entries to evaluate")
    if not np.all(np.isfinite(pred_mean[mask])) or not np.all(np.isfinite(truth[mask])):
        raise InputError("non-finite values among evaluated entries")
    return pred_mean, truth, mask, pred_var


def rmse(pred_mean, truth, mask=None) -> float:
    """Root mean squared error over unmasked entries."""
    pred_mean, truth, mask, _ = _aligned(pred_mean, truth, mask)
    err = pred_mean[mask] - truth[mask]
    return float(np.sqrt(np.mean(err * err)))


def npll(pred_mean, pred_var, truth, mask=None) -> float:
    """Mean negative log density of the truth under marginal Gaussians."""
    pred_mean, truth, mask, pred_var = _aligned(pred_mean, truth, mask, pred_var)
    var = pred_var[mask]
    if np.any(var <= 0.0):
        raise InputError("npll needs strictly positive predictive variances")
    err = truth[mask] - pred_mean[mask]
    return float(np.mean(0.5 * (np.log(2.0 * np.pi * var) + err * err / var)))


def calibration(
    pred_mean, pred_var, truth, mask=None, levels=None
) -> tuple[np.ndarray, float]:
    """Coverage curve and miscalibration area.

    Returns ``(curve, area)`` where ``curve[i] = (nominal, empirical)``.
    The curve is non-decreasing in the nominal level by construction.
    """
    pred_mean, truth, mask, pred_var = _aligned(pred_mean, truth, mask, pred_var)
    levels = DEFAULT_LEVELS if levels is None else np.asarray(levels, dtype=float)
    if levels.ndim != 1 or levels.size == 0:
        raise InputError("levels must be a non-empty 1-D array")
    if np.any(levels <= 0.0) or np.any(levels >= 1.0) or np.any(np.diff(levels) <= 0.0):
        raise InputError("levels must be strictly increasing inside (0, 1)")
    var = pred_var[mask]
    if np.any(var <= 0.0):
        raise InputError("calibration needs strictly positive predictive variances")
    z = np.abs(truth[mask] - pred_mean[mask]) / np.sqrt(var)
    quantiles = norm.ppf(0.5 * (1.0 + levels))
    empirical = np.array([float(np.mean(z <= q)) for q in quantiles])
    area = float(np.trapezoid(np.abs(empirical - levels), levels))
    return np.column_stack([levels, empirical]), area


def extreme_error_rate(
    pred_mean, truth, threshold: float = DEFAULT_EXTREME_THRESHOLD, mask=None
) -> np.ndarray:
    """Per-location fraction of unmasked steps with |error| > threshold.

    Inputs are (n_times, n_locations); locations with no unmasked steps
    report NaN.
    """
    if threshold <= 0.0 or not np.isfinite(threshold):
        raise InputError(f"threshold must be positive and finite, got {threshold}")
    pred_mean, truth, mask, _ = _aligned(pred_mean, truth, mask)
    if pred_mean.ndim != 2:
        raise InputError("extreme_error_rate expects (n_times, n_locations) arrays")
    exceed = (np.abs(pred_mean - truth) > threshold) & mask
    counts = mask.sum(axis=0).astype(float)
    with np.errstate(invalid="ignore"):
        rates = np.where(counts > 0, exceed.sum(axis=0) / np.maximum(counts, 1.0), np.nan)
    return rates


@dataclass(frozen=True)
class DesignMatch:
    """Minimum-cost matching between two designs of near-equal size."""

    total_distance: float
    pairs: tuple[tuple[int, int], ...]
    unmatched: tuple[str, int] | None      # ("a"|"b", index) when sizes differ
    most_displaced: tuple[int, int] | None  # matched pair with the largest distance


def design_distance(a: np.ndarray, b: np.ndarray) -> DesignMatch:
    """Optimal-assignment distance between two designs.

    Sizes may differ by at most one; the unmatched location of the larger
    design is reported. Matched-pair indices refer to input row order.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError(f"designs must share point dimension, got {a.shape} and {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("designs must be non-empty")
    if abs(a.shape[0] - b.shape[0]) > 1:
        raise InputError(
            f"design sizes may differ by at most one, got {a.shape[0]} and {b.shape[0]}"
        )
    cost = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(zip(rows.tolist(), cols.tolist()))
    total = float(cost[rows, cols].sum())
    unmatched = None
    if a.shape[0] > b.shape[0]:
        missing = set(range(a.shape[0])) - set(rows.tolist())
        unmatched = ("a", missing.pop())
    elif b.shape[0] > a.shape[0]:
        missing = set(range(b.shape[0])) - set(cols.tolist())
        unmatched = ("b", missing.pop())
    most = None
    if pairs:
        worst = int(np.argmax(cost[rows, cols]))
        most = pairs[worst]
    return DesignMatch(total, pairs, unmatched, most)


@dataclass
class EvalReport:
    """Bundle of the standard metrics for one prediction run."""

    rmse: float
    npll: float
    miscalibration_area: float
    calibration_curve: np.ndarray
    extreme_error_rate: np.ndarray
    extreme_threshold: float
    n_evaluated: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "npll": self.npll,
            "miscalibration_area": self.miscalibration_area,
            "calibration_curve": [[float(a), float(b)] for a, b in self.calibration_curve],
            "extreme_error_rate": [
                None if not np.isfinite(v) else float(v) for v in self.extreme_error_rate
            ],
            "extreme_threshold": self.extreme_threshold,
            "n_evaluated": self.n_evaluated,
            "metadata": self.metadata,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def evaluate_predictions(
    pred_mean,
    pred_var,
    truth,
    mask=None,
    *,
    extreme_threshold: float = DEFAULT_EXTREME_THRESHOLD,
    levels=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Assemble the full report on (n_times, n_locations) arrays."""
    pred_mean_arr, truth_arr, mask_arr, pred_var_arr = _aligned(pred_mean, truth, mask, pred_var)
    curve, area = calibration(pred_mean_arr, pred_var_arr, truth_arr, mask_arr, levels)
    return EvalReport(
        rmse=rmse(pred_mean_arr, truth_arr, mask_arr),
        npll=npll(pred_mean_arr, pred_var_arr, truth_arr, mask_arr),
        miscalibration_area=area,
        calibration_curve=curve,
        extreme_error_rate=extreme_error_rate(pred_mean_arr, truth_arr, extreme_threshold, mask_arr),
        extreme_threshold=extreme_threshold,
        n_evaluated=int(mask_arr.sum()),
        metadata=metadata or {},
    )
