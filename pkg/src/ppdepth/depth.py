"""Depth pre/post-processing: log transform, per-map percentile normalisation,
its exact inverse, and least-squares affine alignment."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import ContractError

DEFAULT_EPS = 1.0
LOW_PCT = 2.0
HIGH_PCT = 98.0
RANGE_SLACK = 0.05
MIN_VALID = 50

SPACES = ("metric", "log", "normalized")


class DegenerateDepthError(ValueError):
    """The 2%/98% percentiles coincide, so the map cannot be normalised."""


class AlignmentError(ValueError):
    """Least-squares scale/shift system is singular."""


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # [H, W]
    valid: np.ndarray  # bool [H, W]
    space: str = "metric"
    stats: Optional[tuple[float, float]] = None  # (d_min, d_max) in log space
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.space not in SPACES:
            raise ValueError(f"unknown depth space {self.space!r}")
        v = np.asarray(self.values)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2:
            raise ValueError(f"depth values must be [H, W], got {v.shape}")
        if m.shape != v.shape:
            raise ValueError(f"mask {m.shape} does not match values {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)
        if (self.stats is not None) != (self.space == "normalized"):
            raise ContractError("stats must be present exactly when space == 'normalized'")
        if self.space == "metric" and np.any(v[m] <= 0):
            raise ContractError("metric depth must be positive on valid pixels")

    @classmethod
    def from_metric(cls, values, eps: float = DEFAULT_EPS) -> "DepthMap":
        """Metric map where non-positive or non-finite pixels are invalid."""
        v = np.asarray(values)
        return cls(v, np.isfinite(v) & (v > 0), "metric", None, eps)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def percentile(x: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics: position (n-1)*q/100."""
    a = np.asarray(x, dtype=np.float64).ravel()
    if not a.size:
        raise ValueError("percentile of an empty array")
    if not 0 <= q <= 100:
        raise ValueError(f"q must lie in [0, 100], got {q}")
    pos = (a.size - 1) * q / 100.0
    lo = int(pos)
    hi = min(lo + 1, a.size - 1)
    part = np.partition(a, (lo, hi))
    return float(part[lo] + (part[hi] - part[lo]) * (pos - lo))


def to_log(d: DepthMap, eps: Optional[float] = None) -> DepthMap:
    if d.space != "metric":
        raise ContractError(f"to_log expects metric depth, got {d.space}")
    eps = d.eps if eps is None else float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = d.values.copy()
    out[d.valid] = np.log(d.values[d.valid] + eps)
    return DepthMap(out, d.valid, "log", None, eps)


def normalize(d: DepthMap) -> DepthMap:
    """Map log depth so the 2nd/98th percentiles land on -0.5/+0.5 (no clamp)."""
    if d.space != "log":
        raise ContractError(f"normalize expects log depth, got {d.space}")
    vals = d.values[d.valid]
    if vals.size < MIN_VALID:
        raise ContractError(f"need at least {MIN_VALID} valid pixels, got {vals.size}")
    lo, hi = percentile(vals, LOW_PCT), percentile(vals, HIGH_PCT)
    if not hi > lo:
        raise DegenerateDepthError(f"degenerate depth map: p{LOW_PCT:g} == p{HIGH_PCT:g} == {lo}")
    out = d.values.copy()
    out[d.valid] = (vals - lo) / (hi - lo) - 0.5
    return DepthMap(out, d.valid, "normalized", (lo, hi), d.eps)


def denormalize(d: DepthMap, stats: Optional[tuple[float, float]] = None) -> DepthMap:
    """Exact inverse of to_log followed by normalize, back to metric depth."""
    if d.space != "normalized":
        raise ContractError(f"denormalize expects normalized depth, got {d.space}")
    stats = d.stats if stats is None else stats
    if stats is None:
        raise ContractError("denormalize needs (d_min, d_max) stats")
    lo, hi = float(stats[0]), float(stats[1])
    out = d.values.copy()
    out[d.valid] = np.exp((d.values[d.valid] + 0.5) * (hi - lo) + lo) - d.eps
    valid = d.valid & (out > 0)
    return DepthMap(out, valid, "metric", None, d.eps)


def encode(depth: np.ndarray, eps: float = DEFAULT_EPS) -> DepthMap:
    """Metric array -> normalized DepthMap."""
    return normalize(to_log(DepthMap.from_metric(depth, eps)))


def check_normalized_range(x: np.ndarray, slack: float = RANGE_SLACK) -> None:
    x = np.asarray(x)
    bound = 0.5 + slack
    if not x.size:
        return
    if not np.all(np.isfinite(x)):
        raise ContractError("normalized depth contains non-finite values")
    peak = float(np.abs(x).max())
    if peak > bound:
        raise ContractError(f"normalized depth outside [-{bound}, {bound}] (max |x| = {peak:.4f})")


# Default stats used to turn a relative prediction into a positive depth-like
# map when the per-map percentiles are unknown (inference).
NOMINAL_STATS = (1.0, 2.0)


def relative_depth(pred_normalized: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Positive relative depth from a normalized prediction.

    The true (d_min, d_max) are unknown at inference, so a nominal log range is
    used; scale and shift are left to align_affine at evaluation time. The
    result is positive for any input above -1.5, far outside the trained range.
    """
    lo, hi = NOMINAL_STATS
    return np.exp((np.asarray(pred_normalized, dtype=np.float64) + 0.5) * (hi - lo) + lo) - eps


def fit_affine(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[float, float]:
    """(s, b) minimising sum (s*pred + b - gt)^2 over the mask."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if mask is not None:
        p, g = p[mask], g[mask]
    p, g = p.ravel(), g.ravel()
    if p.size < 2:
        raise AlignmentError(f"need at least 2 overlapping valid pixels, got {p.size}")
    pc = p - p.mean()
    var = float(pc @ pc)
    if var <= 1e-12 * max(1.0, float(p @ p)):
        raise AlignmentError("prediction is constant over the valid pixels")
    s = float(pc @ (g - g.mean())) / var
    return s, float(g.mean() - s * p.mean())


def align_affine(pred: DepthMap, gt: DepthMap) -> DepthMap:
    """Least-squares scale/shift of ``pred`` onto ``gt`` over shared valid pixels."""
    mask = pred.valid & gt.valid
    s, b = fit_affine(pred.values, gt.values, mask)
    out = np.where(pred.valid, s * pred.values + b, pred.values)
    if gt.space == "metric":
        return metric_map(out, pred.valid, gt.eps)
    return DepthMap(out, pred.valid, gt.space, gt.stats, gt.eps)


def metric_map(values: np.ndarray, valid: np.ndarray, eps: float = DEFAULT_EPS) -> DepthMap:
    """Metric DepthMap; pixels an affine fit pushed to <= 0 become invalid."""
    return DepthMap(values, valid & (values > 0), "metric", None, eps)


def align_log_affine(pred: np.ndarray, gt: DepthMap) -> DepthMap:
    """Align a positive relative prediction to metric GT in log(d + eps) space.

    An affine fit in log space absorbs the unknown per-map log range of the
    normalised prediction; the result is mapped back to metric depth.
    """
    if gt.space != "metric":
        raise ContractError("ground truth must be metric")
    p = np.asarray(pred, dtype=np.float64)
    valid = gt.valid & np.isfinite(p) & (p + gt.eps > 0)
    lp = np.log(np.where(valid, p + gt.eps, 1.0))
    lg = np.log(np.where(gt.valid, gt.values + gt.eps, 1.0))
    s, b = fit_affine(lp, lg, valid)
    out = np.where(valid, np.exp(s * lp + b) - gt.eps, 0.0)
    return metric_map(out, valid, gt.eps)


def with_values(d: DepthMap, values: np.ndarray) -> DepthMap:
    return replace(d, values=np.asarray(values))
