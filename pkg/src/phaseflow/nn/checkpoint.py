"""Binary checkpoint I/O.

Layout (little-endian): ``b"CKPT"``, u32 version, u32 entry count, then per
entry u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("unrecognized format")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(buf):
                raise CheckpointError("truncated file")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError("truncated file") from exc
    return out
