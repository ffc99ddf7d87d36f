"""Pose error statistics and evaluation reports."""
from __future__ import annotations

import math

import numpy as np

from .geom import quat_angle_deg
from .tensor import ContractError


def median(values) -> float:
    """True median; an even count gives the mean of the central pair."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = len(v)
    if n == 0:
        raise ContractError("median of an empty set")
    mid = n // 2
    return float(v[mid]) if n % 2 else float(0.5 * (v[mid - 1] + v[mid]))


def position_errors(t_pred, t_gt) -> np.ndarray:
    return np.linalg.norm(np.asarray(t_pred, float) - np.asarray(t_gt, float), axis=-1)


def orientation_errors_deg(q_pred, q_gt) -> np.ndarray:
    return np.array([quat_angle_deg(a, b) for a, b in zip(q_pred, q_gt)], dtype=float)


def accuracy_at(et, er, t_thresh: float, r_thresh_deg: float) -> float:
    """Fraction of samples with position error below t_thresh AND angle below r_thresh_deg."""
    et, er = np.asarray(et), np.asarray(er)
    if len(et) == 0:
        raise ContractError("accuracy of an empty set")
    return float(np.mean((et < t_thresh) & (er < r_thresh_deg)))


def evaluate(t_pred, q_pred, t_gt, q_gt, names, t_thresh: float, r_thresh_deg: float) -> dict:
    """Report with stable key order: medians, conjunctive accuracy, per-sample errors."""
    et = position_errors(t_pred, t_gt)
    er = orientation_errors_deg(q_pred, q_gt)
    if not (math.isfinite(t_thresh) and t_thresh > 0 and r_thresh_deg > 0):
        raise ContractError(f"thresholds must be positive, got {t_thresh}, {r_thresh_deg}")
    return {
        "median_t_m": median(et),
        "median_r_deg": median(er),
        "acc@thresh": accuracy_at(et, er, t_thresh, r_thresh_deg),
        "thresh_t_m": float(t_thresh),
        "thresh_r_deg": float(r_thresh_deg),
        "count": int(len(et)),
        "per_sample": [
            {"name": str(n), "t_err_m": float(a), "r_err_deg": float(b)}
            for n, a, b in zip(names, et, er)
        ],
    }
