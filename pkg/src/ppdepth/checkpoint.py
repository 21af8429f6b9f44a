"""Binary parameter checkpoints.

Layout (all little-endian)::

    b"PPDT" | version u32 | count u32 |
    count * ( name_len u16 | name utf-8 | rank u8 | extents u32[rank] | dtype u8 | raw data )

dtype codes: 0 = float32, 1 = float64, 2 = uint8, 3 = int64.
Text metadata (configs) is stored as uint8 arrays of UTF-8 JSON.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PPDT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2, np.dtype(np.int64): 3}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


class CheckpointFormatError(ValueError):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.int64 if arr.dtype.kind in "iub" else np.float64)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _CODES[arr.dtype]
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("bad magic, not a PPDT checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        (code,) = struct.unpack("<B", take(1))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown element type {code}")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(entries))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    try:
        return json.loads(np.asarray(arr, dtype=np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"bad metadata entry: {e}") from None
