"""Flat binary checkpoints of named arrays.

Layout (all little-endian)::

    b"MLRXCKP1"
    u32 count
    repeated count times:
        u16 name length, utf-8 name
        u8 dtype code (0 = float64, 1 = complex128)
        u8 ndim, ndim x u32 dims
        raw array data in C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLRXCKP1"
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = 1 if np.iscomplexobj(arr) else 0
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _CODES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(raw[pos : pos + size], dtype=dtype).reshape(shape).copy()
        pos += size
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out
