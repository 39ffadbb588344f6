"""Binary tensor container used for codec weights and perturbations.

Layout: 8-byte magic ``RVSQCKPT``, uint32 LE entry count, then per entry:
uint32 LE name length, UTF-8 name, uint32 LE rank, one uint32 LE extent per
axis, then the float64 LE payload in C order.  Entries keep insertion
order.  Scalars are rank 0.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"RVSQCKPT"


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _take(buf: bytes, off: int, n: int, path, what: str) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise ValueError(f"{path}: truncated while reading {what}")
    return buf[off:off + n], off + n


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:8]!r}")
    off = 8
    raw, off = _take(buf, off, 4, path, "entry count")
    (count,) = struct.unpack("<I", raw)
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        raw, off = _take(buf, off, 4, path, f"entry {i} name length")
        (nlen,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, nlen, path, f"entry {i} name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 4, path, f"{name}: rank")
        (rank,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 4 * rank, path, f"{name}: extents")
        shape = struct.unpack(f"<{rank}I", raw)
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 8 * n_items, path, f"{name}: payload")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if name in out:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        out[name] = arr
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out
