"""Tensor archive (``.kpt``) reader and writer.

Layout, all integers little-endian::

    b"KPT1"
    u32  entry count
    per entry:
        u16 name length, UTF-8 name
        u8  dtype code (0 = f32, 1 = f64)
        u8  rank
        rank × u64 extents
        raw little-endian payload, row-major

Flow fields are stored as ``H×W×2`` with channel order ``(dx, dy)``, x being
the width axis.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"KPT1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ArchiveError(ValueError):
    """Malformed, truncated or incompatible archive."""


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ArchiveError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"entry name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError("archive truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("bad magic; not a KPT1 archive")
    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveError(f"entry name is not UTF-8: {e}") from None
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ArchiveError(f"entry {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape)
        if name in out:
            raise ArchiveError(f"duplicate entry {name!r}")
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]):
    """Write atomically: a partial file never replaces a good one."""
    blob = dumps(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
