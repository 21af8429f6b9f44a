"""Relative-depth metrics (AbsRel, delta1), pinhole unprojection, Canny edges
on depth and the edge-restricted Chamfer distance, plus a manifest-driven
evaluation harness."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import kernels
from .depth import AlignmentError, DepthMap, align_log_affine, fit_affine, metric_map
from .io import FormatError, read_manifest, read_pfm, resolve_path

log = logging.getLogger(__name__)

LOW_PCT = 70.0
HIGH_PCT = 90.0
DILATION_RADIUS = 2
SIGMA = 1.0


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def default(cls, h: int, w: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        f = 0.5 * w / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, (w - 1) / 2, (h - 1) / 2)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # [N, 3] float64

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class EdgeMask:
    mask: np.ndarray  # bool [H, W], dilated
    dilation_radius: int
    edges: Optional[np.ndarray] = None  # hysteresis output before dilation

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _shared(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    m = pred.valid & gt.valid
    if not m.any():
        raise EmptyMaskError("no pixel is valid in both prediction and ground truth")
    return m


def absrel(pred: DepthMap, gt: DepthMap) -> float:
    m = _shared(pred, gt)
    p = pred.values[m].astype(np.float64)
    g = gt.values[m].astype(np.float64)
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred: DepthMap, gt: DepthMap, threshold: float = 1.25) -> float:
    m = _shared(pred, gt)
    p = pred.values[m].astype(np.float64)
    g = gt.values[m].astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(p > 0, ratio, np.inf)
    return float(np.mean(ratio < threshold))


def unproject(d: DepthMap, K: CameraIntrinsics, mask: Optional[np.ndarray] = None) -> PointCloud:
    """Pinhole back-projection of valid (and masked) pixels, row-major order."""
    if d.space != "metric":
        raise ValueError(f"unproject expects metric depth, got {d.space}")
    sel = d.valid if mask is None else d.valid & mask
    v, u = np.nonzero(sel)
    z = d.values[v, u].astype(np.float64)
    x = (u - K.cx) * z / K.fx
    y = (v - K.cy) * z / K.fy
    return PointCloud(np.stack([x, y, z], axis=1))


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def canny_edges(d: DepthMap, low_pct: float = LOW_PCT, high_pct: float = HIGH_PCT,
                dilation_radius: int = DILATION_RADIUS, sigma: float = SIGMA) -> EdgeMask:
    """Canny on inverse depth scaled to [0, 1], then dilation by a disk.

    Thresholds are the ``low_pct``/``high_pct`` percentiles of the nonzero
    gradient magnitudes of the blurred image.
    """
    if not 0 <= low_pct <= high_pct <= 100:
        raise ValueError("need 0 <= low_pct <= high_pct <= 100")
    if dilation_radius < 0:
        raise ValueError("dilation_radius must be >= 0")
    valid = d.valid
    if valid.sum() < 9:
        raise EmptyMaskError("canny needs at least 9 valid pixels")
    h, w = d.shape
    empty = np.zeros((h, w), dtype=bool)
    vals = d.values.astype(np.float64)
    if d.space == "metric":
        inv = np.where(valid, 1.0 / np.where(valid, vals, 1.0), 0.0)
    else:
        inv = np.where(valid, vals, 0.0)
    lo, hi = inv[valid].min(), inv[valid].max()
    if not hi > lo:
        return EdgeMask(empty, dilation_radius, empty.copy())
    img = np.where(valid, (inv - lo) / (hi - lo), 0.0)
    # invalid pixels take their nearest valid value so holes do not create edges
    if not valid.all():
        idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
        img = img[tuple(idx)]
    img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    top = mag.max()
    nonzero = mag[mag > top * 1e-6]
    if top <= 0 or nonzero.size == 0:
        return EdgeMask(empty, dilation_radius, empty.copy())
    t_lo = float(np.percentile(nonzero, low_pct))
    t_hi = float(np.percentile(nonzero, high_pct))
    thin = kernels.nms(np.ascontiguousarray(mag), np.ascontiguousarray(gx), np.ascontiguousarray(gy))
    edges = kernels.hysteresis(thin, t_lo, t_hi) & valid
    mask = edges if dilation_radius == 0 else ndimage.binary_dilation(edges, structure=disk(dilation_radius))
    return EdgeMask(mask & valid, dilation_radius, edges)


def _points(pc) -> np.ndarray:
    return pc.points if isinstance(pc, PointCloud) else PointCloud(pc).points


def chamfer_edge(pred_pc, gt_pc) -> float:
    """Symmetric mean of unsquared nearest-neighbour distances."""
    a, b = _points(pred_pc), _points(gt_pc)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMaskError("chamfer distance of an empty point cloud")
    d_ab = np.sqrt(kernels.nearest_sqdist(np.ascontiguousarray(a), np.ascontiguousarray(b)))
    d_ba = np.sqrt(kernels.nearest_sqdist(np.ascontiguousarray(b), np.ascontiguousarray(a)))
    return 0.5 * float(d_ab.mean()) + 0.5 * float(d_ba.mean())


def chamfer_brute(pred_pc, gt_pc, chunk: int = 1024) -> float:
    """O(N*M) reference implementation."""
    a, b = _points(pred_pc), _points(gt_pc)
    if len(a) == 0 or len(b) == 0:
        raise EmptyMaskError("chamfer distance of an empty point cloud")

    def one_way(p, q):
        best = np.empty(len(p))
        for i in range(0, len(p), chunk):
            diff = p[i:i + chunk, None, :] - q[None, :, :]
            best[i:i + chunk] = np.sqrt((diff * diff).sum(-1)).min(axis=1)
        return best.mean()

    return 0.5 * float(one_way(a, b)) + 0.5 * float(one_way(b, a))


@dataclass
class ImageResult:
    id: str
    absrel: float = float("nan")
    delta1: float = float("nan")
    chamfer_edge: float = float("nan")
    n_valid: int = 0
    n_edge: int = 0
    status: str = "ok"


@dataclass
class MetricsReport:
    absrel: float
    delta1: float
    chamfer_edge: float
    per_image: list[ImageResult] = field(default_factory=list)
    n_images: int = 0
    n_valid: int = 0
    n_edge: int = 0
    missing: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing

    def to_dict(self) -> dict:
        return {
            "aggregate": {"absrel": self.absrel, "delta1": self.delta1, "chamfer_edge": self.chamfer_edge,
                          "n_images": self.n_images, "n_valid": self.n_valid, "n_edge": self.n_edge},
            "per_image": [asdict(r) for r in self.per_image],
            "missing": list(self.missing),
        }


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, K: CameraIntrinsics, image_id: str = "",
                  align: str = "log", edges: Optional[EdgeMask] = None) -> ImageResult:
    """Metrics for one relative prediction against metric ground truth."""
    gt_map = DepthMap.from_metric(np.asarray(gt, dtype=np.float64))
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt_map.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt_map.shape} differ in size")
    if align == "log":
        aligned = align_log_affine(pred, gt_map)
    elif align == "metric":
        valid = np.isfinite(pred) & gt_map.valid
        s, b = fit_affine(pred, gt_map.values, valid)
        aligned = metric_map(np.where(valid, s * pred + b, 0.0), valid, gt_map.eps)
    elif align == "none":
        aligned = DepthMap.from_metric(pred)
    else:
        raise ValueError(f"unknown alignment {align!r}")
    res = ImageResult(image_id, absrel(aligned, gt_map), delta1(aligned, gt_map),
                      n_valid=int((aligned.valid & gt_map.valid).sum()))
    edges = canny_edges(gt_map) if edges is None else edges
    m = edges.mask & aligned.valid & gt_map.valid
    res.n_edge = int(m.sum())
    if res.n_edge:
        res.chamfer_edge = chamfer_edge(unproject(aligned, K, m), unproject(gt_map, K, m))
    return res


def _nanmean(vals: Sequence[float]) -> float:
    v = np.asarray([x for x in vals if np.isfinite(x)], dtype=np.float64)
    return float(v.mean()) if v.size else float("nan")


def aggregate(results: Sequence[ImageResult], missing: Sequence[str] = ()) -> MetricsReport:
    ok = [r for r in results if r.status == "ok"]
    return MetricsReport(
        absrel=_nanmean([r.absrel for r in ok]),
        delta1=_nanmean([r.delta1 for r in ok]),
        chamfer_edge=_nanmean([r.chamfer_edge for r in ok]),
        per_image=list(results),
        n_images=len(ok),
        n_valid=sum(r.n_valid for r in ok),
        n_edge=sum(r.n_edge for r in ok),
        missing=list(missing),
    )


def evaluate_run(pred_dir, gt_dir, manifest, align: str = "log") -> MetricsReport:
    """Evaluate every manifest row; pred/gt paths resolve against the given dirs.

    Rows whose files are missing or unreadable are listed in ``missing`` and
    excluded from the means.
    """
    rows = read_manifest(manifest, kind="eval", resolve=False)
    base = Path(manifest).parent
    pred_dir = base if pred_dir is None else Path(pred_dir)
    gt_dir = base if gt_dir is None else Path(gt_dir)
    results, missing = [], []
    for row in rows:
        try:
            pred = read_pfm(resolve_path(pred_dir, row.paths[0]))
            gt = read_pfm(resolve_path(gt_dir, row.paths[1]))
            K = CameraIntrinsics(row.fx, row.fy, row.cx, row.cy)
            results.append(evaluate_pair(pred, gt, K, row.id, align))
        except (FormatError, ValueError, AlignmentError) as e:
            log.warning("%s: %s", row.id, e)
            missing.append(row.id)
            results.append(ImageResult(row.id, status=f"error: {e}"))
    return aggregate(results, missing)


REPORT_FIELDS = ("id", "absrel", "delta1", "chamfer_edge", "n_valid", "n_edge", "status")


def write_report(report: MetricsReport, prefix: Union[str, Path]) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (per-image rows + a ``mean`` row) and ``<prefix>.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    json_path = prefix.with_name(prefix.name + ".json")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_FIELDS)
        for r in report.per_image:
            w.writerow([r.id, repr(r.absrel), repr(r.delta1), repr(r.chamfer_edge), r.n_valid, r.n_edge, r.status])
        w.writerow(["mean", repr(report.absrel), repr(report.delta1), repr(report.chamfer_edge),
                    report.n_valid, report.n_edge, "ok" if report.ok else f"missing {len(report.missing)}"])
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return csv_path, json_path
