"""Binary checkpoint container for model weights and run metadata.

Layout (all integers little-endian u32):

    magic  b"REDI"
    format version
    meta length, then that many bytes of UTF-8 JSON
    tensor count, then per tensor:
        name length, UTF-8 name
        rank, then one u32 per dim
        float32 payload, little-endian, C order

Writes go through a temp file and os.replace so a crash never leaves a
truncated checkpoint at the target path.  Round trips are bit-identical:
load(save(x)) returns the same bytes for every tensor and the same JSON
document (key order is canonicalized on write).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"REDI"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or wrong-version checkpoint data."""


def _pack_u32(n: int) -> bytes:
    if not 0 <= n <= 0xFFFFFFFF:
        raise CheckpointError(f"value {n} does not fit in u32")
    return struct.pack("<I", n)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"'{self.path}' is truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(path: str | Path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and named float32 tensors atomically."""
    path = Path(path)
    names = list(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("tensor names must be unique")

    parts = [MAGIC, _pack_u32(FORMAT_VERSION)]
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(_pack_u32(len(meta_blob)))
    parts.append(meta_blob)
    parts.append(_pack_u32(len(names)))
    for name in names:
        # asarray keeps 0-d tensors 0-d (ascontiguousarray promotes to 1-d)
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        name_b = name.encode("utf-8")
        parts.append(_pack_u32(len(name_b)))
        parts.append(name_b)
        parts.append(_pack_u32(arr.ndim))
        for d in arr.shape:
            parts.append(_pack_u32(d))
        parts.append(arr.tobytes(order="C"))

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as (meta, {name: float32 array})."""
    path = Path(path)
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))

    if r.take(4) != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"'{path}' has format version {version}, this build reads version {FORMAT_VERSION}"
        )
    meta = json.loads(r.take(r.u32()).decode("utf-8"))

    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"'{path}' repeats tensor name '{name}'")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(count * 4)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32, copy=True)
    if r.pos != len(r.data):
        raise CheckpointError(f"'{path}' has {len(r.data) - r.pos} trailing bytes")
    return meta, tensors
