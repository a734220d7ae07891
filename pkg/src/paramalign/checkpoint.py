"""Binary tensor container.

Layout (all integers little-endian)::

    magic   b"PACK"
    version u32          (currently 1)
    count   u64
    entries:
        name_len u32, name utf-8 bytes
        rank     u32
        extents  rank x u64
        dtype    u8       (0 = float32, 1 = float64)
        payload  row-major little-endian values

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PACK"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            (tag,) = struct.unpack_from("<B", buf, off)
            off += 1
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"{name}: truncated payload")
            arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off)
            out[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
            off += nbytes
    except (struct.error, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    return out


def save(path, tensors: Mapping[str, np.ndarray]):
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
