"""Versioned binary container for named float64 arrays.

Layout (all integers unsigned 64-bit little-endian, values float64 LE)::

    b"BCDE1" | count | count x (name_len | name | rank | dims... | values...)

Used for model checkpoints and for prepared-split caches.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"BCDE1"
_U64 = struct.Struct("<Q")


class FormatError(ValueError):
    """The file is not a container of the expected version, or is truncated."""


def write_container(path, arrays: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, _U64.pack(len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(arr.ndim))
        chunks.extend(_U64.pack(n) for n in arr.shape)
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:len(MAGIC)]!r}, expected {MAGIC!r} (version mismatch)")
    pos = len(MAGIC)

    def u64():
        nonlocal pos
        if pos + 8 > len(buf):
            raise FormatError(f"{path}: truncated file")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    out = {}
    for _ in range(u64()):
        n = u64()
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated file")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        shape = tuple(u64() for _ in range(u64()))
        size = int(np.prod(shape)) * 8
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated file")
        out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def encode_str(s: str) -> np.ndarray:
    return np.array([ord(c) for c in s], dtype=np.float64)


def decode_str(a: np.ndarray) -> str:
    return "".join(chr(int(c)) for c in np.asarray(a).reshape(-1))
