"""File formats: PFM depth, binary PGM images, ASCII PLY clouds, CSV manifests."""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """A file is missing, truncated or not in the expected format."""

    def __init__(self, path, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = str(path)


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(path, f"cannot read ({e.strerror})") from None


def _header_tokens(blob: bytes, count: int, path) -> tuple[list[bytes], int]:
    """Split the first ``count`` whitespace-separated header tokens (PNM style,
    with # comments) and return them with the offset of the binary payload."""
    tokens: list[bytes] = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(path, "truncated header")
        tokens.append(blob[start:pos])
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise FormatError(path, "truncated header")
    return tokens, pos + 1


# -- PFM ---------------------------------------------------------------------

def write_pfm(path: PathLike, data: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"PFM needs a [H, W] array, got {a.shape}")
    h, w = a.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    _atomic_write(Path(path), header + np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    blob = _read(path)
    tokens, off = _header_tokens(blob, 4, path)
    kind = tokens[0]
    if kind not in (b"Pf", b"PF"):
        raise FormatError(path, f"not a PFM file (magic {kind[:8]!r})")
    try:
        w, h, scale = int(tokens[1]), int(tokens[2]), float(tokens[3])
    except ValueError:
        raise FormatError(path, "malformed PFM header") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(path, "malformed PFM header")
    ch = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * ch * 4
    if len(blob) - off != need:
        raise FormatError(path, f"expected {need} data bytes, found {len(blob) - off}")
    a = np.frombuffer(blob, dtype=dtype, count=w * h * ch, offset=off).reshape(h, w, ch)
    if ch == 3:
        raise FormatError(path, "colour PFM where a single-channel depth map was expected")
    return a[::-1, :, 0].astype(np.float32)


# -- PGM ---------------------------------------------------------------------

def write_pgm(path: PathLike, image: np.ndarray, maxval: int = 65535) -> None:
    """Binary P5 PGM from values in [0, 1]; 16-bit samples are big-endian."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"PGM needs a [H, W] image, got {a.shape}")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    h, w = a.shape
    payload = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    _atomic_write(Path(path), f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + payload)


def read_pgm(path: PathLike) -> np.ndarray:
    """P5 PGM as float64 in [0, 1], shape [H, W]."""
    blob = _read(path)
    tokens, off = _header_tokens(blob, 4, path)
    if tokens[0] != b"P5":
        raise FormatError(path, f"not a binary PGM (magic {tokens[0][:8]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(path, "malformed PGM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 65535:
        raise FormatError(path, "malformed PGM header")
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(blob) - off != need:
        raise FormatError(path, f"expected {need} data bytes, found {len(blob) - off}")
    a = np.frombuffer(blob, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return a.astype(np.float64) / maxval


# -- PLY ---------------------------------------------------------------------

def write_ply(path: PathLike, points: np.ndarray, intensity: Optional[np.ndarray] = None) -> None:
    """ASCII PLY; coordinates as doubles written with round-trip precision.

    ``intensity`` in [0, 1] becomes grey red/green/blue vertex colours.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", "comment ppdepth point cloud",
             f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z"]
    if intensity is not None:
        grey = np.rint(np.clip(np.asarray(intensity, dtype=np.float64).ravel(), 0, 1) * 255).astype(int)
        if len(grey) != len(pts):
            raise ValueError("intensity must have one value per point")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    body = []
    for i, (x, y, z) in enumerate(pts.tolist()):
        row = f"{x!r} {y!r} {z!r}"
        if intensity is not None:
            g = grey[i]
            row += f" {g} {g} {g}"
        body.append(row)
    text = "\n".join(lines + body) + "\n"
    _atomic_write(Path(path), text.encode("ascii"))


def read_ply(path: PathLike) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """(points [N, 3] float64, grey intensity [N] in [0, 1] or None)."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(path, f"cannot read PLY ({e})") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(path, "missing 'ply' magic")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise FormatError(path, "missing end_header") from None
    header = lines[1:end]
    if "format ascii 1.0" not in header:
        raise FormatError(path, "only ASCII PLY is supported")
    n = None
    props: list[str] = []
    for ln in header:
        m = re.match(r"element vertex (\d+)$", ln)
        if m:
            n = int(m.group(1))
        elif ln.startswith("property"):
            props.append(ln.split()[-1])
    if n is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(path, "no x/y/z vertex element")
    rows = lines[end + 1:end + 1 + n]
    if len(rows) != n:
        raise FormatError(path, f"expected {n} vertices, found {len(rows)}")
    try:
        vals = [[float(v) for v in r.split()] for r in rows]
    except ValueError:
        raise FormatError(path, "non-numeric vertex data") from None
    arr = np.array(vals, dtype=np.float64).reshape(n, len(props)) if n else np.zeros((0, len(props)))
    intensity = arr[:, props.index("red")] / 255.0 if "red" in props else None
    return arr[:, :3].copy(), intensity


# -- manifests ---------------------------------------------------------------

DATASET_FIELDS = ("id", "image_path", "depth_path", "fx", "fy", "cx", "cy")
EVAL_FIELDS = ("id", "pred_path", "gt_path", "fx", "fy", "cx", "cy")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    paths: tuple[str, str]
    fx: float
    fy: float
    cx: float
    cy: float


def write_manifest(path: PathLike, rows: Iterable[ManifestRow], kind: str = "dataset") -> None:
    fields = DATASET_FIELDS if kind == "dataset" else EVAL_FIELDS
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for r in rows:
            w.writerow([r.id, r.paths[0], r.paths[1], repr(r.fx), repr(r.fy), repr(r.cx), repr(r.cy)])


def read_manifest(path: PathLike, kind: str = "dataset", resolve: bool = True) -> list[ManifestRow]:
    """Rows of a manifest; relative paths are resolved against its directory
    unless ``resolve`` is False."""
    fields = DATASET_FIELDS if kind == "dataset" else EVAL_FIELDS
    path = Path(path)
    try:
        f = open(path, newline="")
    except OSError as e:
        raise FormatError(path, f"cannot read manifest ({e.strerror})") from None
    rows = []
    with f:
        reader = csv.reader(f)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != fields:
            raise FormatError(path, f"expected header {','.join(fields)}, got {','.join(header)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(fields):
                raise FormatError(path, f"line {lineno}: expected {len(fields)} columns, got {len(rec)}")
            rec = [c.strip() for c in rec]
            try:
                fx, fy, cx, cy = (float(v) for v in rec[3:])
            except ValueError:
                raise FormatError(path, f"line {lineno}: non-numeric intrinsics") from None
            p1, p2 = rec[1:3]
            if resolve:
                p1, p2 = (str(_resolve(path.parent, p)) for p in (p1, p2))
            rows.append(ManifestRow(rec[0], (p1, p2), fx, fy, cx, cy))
    return rows


def _resolve(base: PathLike, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(base) / q


resolve_path = _resolve


def relpath(p: PathLike, start: PathLike) -> str:
    return os.path.relpath(p, start)


def sequence_ids(prefix: str, n: int) -> Sequence[str]:
    width = max(4, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]
