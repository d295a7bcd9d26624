"""STT1 binary tensor persistence.

Layout: magic bytes ``STT1``, u32 rank, rank x u64 extents, then
product-many f64 values, all little-endian. Every module that persists
arrays (datasets, supports, checkpoints, predictions) goes through here.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

MAGIC = b"STT1"


def write_stt1(path, array) -> None:
    """Write a Tensor or numpy array to ``path`` in STT1 format."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = arr.astype("<f8", copy=False)  # note: keeps 0-d rank, unlike ascontiguousarray
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.tobytes(order="C"))


def read_stt1(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    shape = []
    for _ in range(rank):
        (extent,) = struct.unpack_from("<Q", raw, offset)
        shape.append(extent)
        offset += 8
    count = int(np.prod(shape)) if shape else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise ConfigError(f"{path}: expected {expected} bytes for shape {tuple(shape)}, file has {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return values.astype(np.float64).reshape(shape)


def read_stt1_tensor(path) -> Tensor:
    return Tensor(read_stt1(path))


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
