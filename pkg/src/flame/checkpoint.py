"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"FLAM"  u32 version  u32 group_count
    per group:
        u32 name_len, name (UTF-8)
        u8 dtype tag (0 = float32, 1 = float64)
        u32 rank, rank x u32 dims
        raw little-endian values, row-major
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"FLAM"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, value in params.items():
        value = np.asarray(value)
        if value.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
        tag = _TAG_OF[value.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype=_TAGS[tag]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a FLAM checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        tag, rank = take("<BI")
        if tag not in _TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = take(f"<{rank}I")
        dtype = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError("truncated checkpoint")
        values = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape)
        params[name] = values.astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(view):
        raise CheckpointError("trailing bytes after last group")
    return params


def save(path, params: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
