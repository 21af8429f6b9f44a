"""Procedural scenes of flat-shaded primitives in front of a tilted background
plane, with exact per-pixel depth. Stand-in training/eval data."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .depth import DegenerateDepthError, DepthMap, encode
from .dit import ConfigError
from .io import ManifestRow, read_manifest, read_pfm, read_pgm, relpath, write_manifest, write_pfm, write_pgm
from .metrics import CameraIntrinsics, canny_edges

PRIMITIVES = ("rectangle", "circle", "triangle")


@dataclass
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 6
    primitives: tuple[str, ...] = PRIMITIVES
    depth_min: float = 1.0
    depth_max: float = 50.0
    background_near: tuple[float, float] = (15.0, 50.0)  # range of the plane's nearest depth
    background_tilt: float = 0.6  # max relative depth change across the image
    min_gap: float = 2.0  # object/background separation at every object pixel
    fov_deg: float = 60.0
    noise: float = 0.01
    # depth cues: haze thickening with distance, and surface gratings with a fixed
    # world-space period whose image-space frequency grows with depth
    fog_distance: float = 30.0
    airlight: float = 0.7
    texture_period: float = 1.5
    texture_contrast: float = 0.35
    # generated maps whose normalised depth leaves [-limit, limit] are redrawn
    range_limit: float = 0.55
    edge_fraction: tuple[float, float] = (0.01, 0.15)
    max_attempts: int = 50

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigError("scene must be at least 8x8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        bad = set(self.primitives) - set(PRIMITIVES)
        if bad or not self.primitives:
            raise ConfigError(f"unknown primitives {sorted(bad)}; choose from {PRIMITIVES}")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("need 0 < depth_min < depth_max")
        lo, hi = self.background_near
        if not self.depth_min + self.min_gap < lo <= hi <= self.depth_max:
            raise ConfigError("background range must lie inside the depth range, behind the nearest objects")
        if not 0 <= self.background_tilt < 1:
            raise ConfigError("background_tilt must be in [0, 1)")
        if self.fog_distance <= 0 or self.texture_period <= 0:
            raise ConfigError("fog_distance and texture_period must be positive")
        if not 0 <= self.airlight <= 1 or not 0 <= self.texture_contrast < 1:
            raise ConfigError("airlight must be in [0, 1] and texture_contrast in [0, 1)")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.height, self.width, self.fov_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = list(self.primitives)
        d["background_near"] = list(self.background_near)
        d["edge_fraction"] = list(self.edge_fraction)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scene keys: {sorted(extra)}")
        d = dict(d)
        for k in ("primitives", "background_near", "edge_fraction"):
            if k in d:
                d[k] = tuple(d[k])
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [H, W, 1] float32 in [0, 1]
    depth: np.ndarray  # [H, W] float32 metric, > 0
    intrinsics: CameraIntrinsics

    @property
    def depth_map(self) -> DepthMap:
        return DepthMap.from_metric(self.depth)


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i])
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def depths(self) -> np.ndarray:
        return np.stack([s.depth for s in self.samples])

    def normalized_depths(self) -> np.ndarray:
        return np.stack([encode(s.depth).values for s in self.samples]).astype(np.float32)


# -- rasterisation -------------------------------------------------------------

def _shape_mask(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    size = min(h, w)
    cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
    if kind == "circle":
        r = rng.uniform(0.1, 0.25) * size
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        a, b = rng.uniform(0.1, 0.3, size=2) * size
        th = rng.uniform(0, math.pi)
        c, s = math.cos(th), math.sin(th)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    # triangle: three vertices around the centre
    r = rng.uniform(0.15, 0.35) * size
    angles = rng.uniform(0, 2 * math.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.4, 0.4, 3)
    px = cx + r * np.cos(angles)
    py = cy + r * np.sin(angles)
    inside_pos = np.ones((h, w), dtype=bool)
    inside_neg = np.ones((h, w), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    return inside_pos | inside_neg


def _grating(rng: np.random.Generator, xx, yy, depth, intr: CameraIntrinsics, period: float) -> np.ndarray:
    # stripes painted on the surface: world-space coordinates scale with depth
    th = rng.uniform(0, math.pi)
    wx = (xx - intr.cx) * depth / intr.fx
    wy = (yy - intr.cy) * depth / intr.fy
    return np.sin(2 * math.pi * (wx * math.cos(th) + wy * math.sin(th)) / period + rng.uniform(0, 2 * math.pi))


def _render(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.height, spec.width
    intr = spec.intrinsics()
    yy, xx = np.mgrid[0:h, 0:w]
    v, u = yy / max(h - 1, 1), xx / max(w - 1, 1)

    # background plane: nearest depth `near`, growing by up to `tilt` across the frame
    near = rng.uniform(*spec.background_near)
    gu, gv = rng.uniform(0, spec.background_tilt, size=2)
    if rng.random() < 0.5:
        u = 1 - u
    depth = near * (1 + gu * u + gv * v)
    depth = np.minimum(depth, spec.depth_max)
    bg_min = float(depth.min())
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), 1.0])
    light /= np.linalg.norm(light)
    bg_albedo = rng.uniform(0.3, 0.8)
    bg_normal = np.array([-gu, -gv, 1.0])
    bg_normal /= np.linalg.norm(bg_normal)
    shade = np.full((h, w), bg_albedo * (0.25 + 0.75 * max(0.0, float(bg_normal @ light))))
    shade *= 1.0 + 0.15 * np.sin(6 * u + 4 * v)  # low-frequency albedo variation
    shade *= 1.0 + spec.texture_contrast * _grating(rng, xx, yy, depth, intr, spec.texture_period)

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        kind = spec.primitives[int(rng.integers(len(spec.primitives)))]
        mask = _shape_mask(kind, rng, h, w)
        if not mask.any():
            continue
        # log-uniform depth in front of the background, with a small planar tilt
        z_hi = bg_min - spec.min_gap
        z0 = math.exp(rng.uniform(math.log(spec.depth_min), math.log(z_hi)))
        tu, tv = rng.uniform(-0.05, 0.05, size=2)
        z = z0 * (1 + tu * (u - 0.5) + tv * (v - 0.5))
        z = np.clip(z, spec.depth_min, z_hi)
        closer = mask & (z < depth)
        depth = np.where(closer, z, depth)
        normal = np.array([-tu, -tv, 1.0]) + rng.normal(0, 0.3, 3) * np.array([1, 1, 0])
        normal /= np.linalg.norm(normal)
        albedo = rng.uniform(0.2, 1.0)
        obj_shade = albedo * (0.25 + 0.75 * max(0.0, float(normal @ light)))
        obj_shade = obj_shade * (1.0 + spec.texture_contrast * _grating(rng, xx, yy, z, intr, spec.texture_period))
        shade = np.where(closer, obj_shade, shade)

    # haze ties intensity to depth without determining it, then sensor noise
    trans = np.exp(-depth / spec.fog_distance)
    image = shade * trans + spec.airlight * (1 - trans)
    image = image + rng.normal(0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image.astype(np.float32)[..., None], depth.astype(np.float32)


def _accept(spec: SceneSpec, depth: np.ndarray) -> bool:
    try:
        dn = encode(depth)
    except DegenerateDepthError:
        return False
    if np.abs(dn.values).max() > spec.range_limit:
        return False
    # at least one discontinuity of >= min_gap between 4-neighbours
    jump = max(float(np.abs(np.diff(depth, axis=0)).max()), float(np.abs(np.diff(depth, axis=1)).max()))
    if jump < spec.min_gap:
        return False
    edges = canny_edges(DepthMap.from_metric(depth), dilation_radius=0).edges
    lo, hi = spec.edge_fraction
    return lo <= edges.mean() <= hi


class GenerationError(RuntimeError):
    pass


def generate_one(spec: SceneSpec, index: int, sample_id: Optional[str] = None) -> Sample:
    """Sample ``index`` of the stream defined by ``spec.seed`` (independent of other indices)."""
    for attempt in range(spec.max_attempts):
        rng = np.random.default_rng([spec.seed, index, attempt])
        image, depth = _render(spec, rng)
        if _accept(spec, depth):
            return Sample(sample_id or f"s{index:05d}", image, depth, spec.intrinsics())
    raise GenerationError(f"sample {index}: no acceptable scene in {spec.max_attempts} attempts")


def generate(spec: SceneSpec, count: int, start: int = 0) -> Dataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    spec.validate()
    return Dataset([generate_one(spec, start + i) for i in range(count)])


def split(dataset: Dataset, ratios: Sequence[float], seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint, exhaustive, seed-deterministic (train, val, test) split."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(r[0] * n))
    n_val = min(int(round(r[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(Dataset([dataset.samples[i] for i in sorted(p)]) for p in parts)


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """images/<id>.pgm (16-bit), depths/<id>.pfm, manifest.csv."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "depths").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in dataset:
        ip = d / "images" / f"{s.id}.pgm"
        dp = d / "depths" / f"{s.id}.pfm"
        write_pgm(ip, s.image)
        write_pfm(dp, s.depth)
        K = s.intrinsics
        rows.append(ManifestRow(s.id, (relpath(ip, d), relpath(dp, d)), K.fx, K.fy, K.cx, K.cy))
    manifest = d / "manifest.csv"
    write_manifest(manifest, rows, kind="dataset")
    return manifest


def load_dataset(directory: Union[str, Path]) -> Dataset:
    d = Path(directory)
    manifest = d / "manifest.csv" if d.is_dir() else d
    samples = []
    for row in read_manifest(manifest, kind="dataset"):
        image = read_pgm(row.paths[0]).astype(np.float32)[..., None]
        depth = read_pfm(row.paths[1])
        samples.append(Sample(row.id, image, depth, CameraIntrinsics(row.fx, row.fy, row.cx, row.cy)))
    return Dataset(samples)
