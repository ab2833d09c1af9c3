"""Binary cache file format "KVFF".

Layout: magic bytes ``KVFF``, format version (u32), then ``L, B, p, t, h, d``
(each u32), then keys followed by values as little-endian 32-bit floats in
layer, request, block, token, head, embedding order (C-order over the
``(L, B, p, t, h, d)`` tensor).  All integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import CacheDims, PagedKvCache
from .errors import FormatError

MAGIC = b"KVFF"
VERSION = 1

_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, L, B, p, t, h, d


def save_cache(cache: PagedKvCache, path: str | Path) -> None:
    """Write a cache to ``path``; values are narrowed to float32."""
    dims = cache.dims
    header = _HEADER.pack(MAGIC, VERSION, dims.L, dims.B, dims.p, dims.t, dims.h, dims.d)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(cache.keys, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cache.values, dtype="<f4").tobytes())


def load_cache(path: str | Path) -> PagedKvCache:
    """Read a KVFF file; float32 payload is widened to float64."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(
            f"file too short for header: expected {_HEADER.size} bytes, got {len(data)}",
            offset=len(data),
        )
    magic, version, L, B, p, t, h, d = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported KVFF version {version}, expected {VERSION}", offset=4)
    try:
        dims = CacheDims(B=B, p=p, t=t, h=h, d=d, L=L)
    except Exception as exc:
        raise FormatError(f"invalid dimensions in header: {exc}", offset=8) from exc
    count = L * B * p * t * h * d
    expected = _HEADER.size + 2 * count * 4
    if len(data) != expected:
        raise FormatError(
            f"truncated or oversized payload: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
        )
    payload = np.frombuffer(data, dtype="<f4", count=2 * count, offset=_HEADER.size)
    keys = payload[:count].astype(np.float64).reshape(dims.shape)
    values = payload[count:].astype(np.float64).reshape(dims.shape)
    return PagedKvCache(dims=dims, keys=keys, values=values)
