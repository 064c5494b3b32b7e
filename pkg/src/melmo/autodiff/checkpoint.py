"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic   b"MELMOCKP"
    version u32
    count   u32
    count x record:
        name_len u32, name utf-8 bytes,
        ndim u32, ndim x u64 dims,
        prod(dims) x float64 little-endian

Round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from ..errors import IngestionError

MAGIC = b"MELMOCKP"
VERSION = 1


def _write(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        _write(fh, arrays)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise IngestionError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            arrays[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise IngestionError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise IngestionError(f"{path}: trailing bytes after {count} records")
    return arrays
