"""Flat binary tensor container used for forward-pass dumps and weight files.

Layout (all little-endian):
    magic   4 bytes  "DFTK"
    version u32      currently 1
    rank    u32
    extents u64[rank]
    dtype   u32      0 = float64, 1 = float32
    data    row-major array payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .numerics import ShapeError

MAGIC = b"DFTK"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_FOR_KIND = {"float64": 0, "float32": 1}


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.name not in _TAG_FOR_KIND:
        raise ShapeError(f"container supports f64/f32 only, got {arr.dtype}")
    tag = _TAG_FOR_KIND[arr.dtype.name]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(struct.pack("<I", tag))
    buf.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ShapeError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ShapeError(f"{path}: unsupported container version {version}")
    offset = 12
    shape = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    (tag,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if tag not in _DTYPE_TAGS:
        raise ShapeError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise ShapeError(
            f"{path}: payload is {len(raw) - offset} bytes, expected "
            f"{count * dtype.itemsize}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
