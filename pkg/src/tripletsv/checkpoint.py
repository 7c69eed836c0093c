"""Parameter container: named float64 arrays in one versioned binary file.

Layout (little-endian)::

    b"TSVPARAM"  u32 version  u32 count
    repeat count times, entries sorted by name:
        u32 name_len  name (utf-8)  u32 ndim  u32 dims[ndim]  f64 data[prod(dims)]
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"TSVPARAM"
VERSION = 1


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")  # ascontiguousarray would make 0-d arrays 1-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise FormatError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported parameter container version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated parameter container: {exc}") from None
    if pos != len(blob):
        raise FormatError("trailing bytes after parameter container")
    return out


def save(path: str | os.PathLike, params: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(params))
    tmp.replace(path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
