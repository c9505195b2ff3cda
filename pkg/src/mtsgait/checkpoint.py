"""Binary checkpoint format for named tensor tables.

Layout (all integers little-endian):

    magic   4 bytes   b"MTSG"
    version u16       currently 1
    count   u32       number of entries
    entry:
      name_len u32
      name     UTF-8 bytes
      rank     u32
      extents  u32 x rank
      data     float32 x prod(extents), C order

Entries are written in sorted name order so identical tables serialize
to identical bytes. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MTSG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_table(path, table: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(table)))
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype=np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_table(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<H", blob, off)
    off += 2
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=off).copy()
        off += 4 * size
        table[name] = data.reshape(shape)
    if off != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - off} trailing bytes after table")
    return table


def encode_text(text: str) -> np.ndarray:
    """Store a UTF-8 string as a float32 vector of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
