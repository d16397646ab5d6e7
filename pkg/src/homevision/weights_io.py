"""Binary serialization of named parameter tensors (format "VHW1").

Layout, all little-endian, no padding:

    magic   4 bytes  "VHW1"
    count   u64      number of entries
    entry   repeated:
        name_len  u16
        name      UTF-8 bytes
        rank      u8
        extents   rank x u32
        data      prod(extents) x f32, row-major

Entries are written in sorted name order so identical stores serialize to
identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VHW1"

WeightStore = dict[str, np.ndarray]


class WeightFormatError(ValueError):
    """The byte stream is not a well-formed VHW1 weight file."""


def dump_weights(store: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<Q", len(store))]
    for name in sorted(store):
        arr = np.ascontiguousarray(store[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_weights(data: bytes) -> WeightStore:
    if data[:4] != MAGIC:
        raise WeightFormatError("missing VHW1 magic")
    if len(data) < 12:
        raise WeightFormatError("truncated header")
    (count,) = struct.unpack_from("<Q", data, 4)
    pos = 12
    store: WeightStore = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos)
            if arr.size != n:
                raise WeightFormatError(f"truncated tensor data for {name!r}")
            pos += 4 * n
        except struct.error as exc:
            raise WeightFormatError("truncated weight entry") from exc
        if name in store:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        store[name] = arr.reshape(shape).astype(np.float32)
    if pos != len(data):
        raise WeightFormatError(f"{len(data) - pos} trailing bytes after last entry")
    return store


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(dump_weights(store))


def load_weights(path) -> WeightStore:
    return parse_weights(Path(path).read_bytes())


def weights_checksum(data: bytes) -> str:
    """Short identity hash of a serialized weight file."""
    return hashlib.sha256(data).hexdigest()[:12]
