"""CRC-terminated binary container for parameter tensors, used by checkpoints and datasets.

Layout: magic "TENT", u32-le version, length-prefixed UTF-8 JSON descriptor,
then per-tensor records (length-prefixed name, u32 rank, u32 extents, raw
little-endian f32 payload), terminated by a CRC32 of all preceding bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "MAGIC", "VERSION", "read_container", "write_container"]

MAGIC = b"TENT"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed, corrupted, or unsupported container file."""


def write_container(path, descriptor: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(desc))
    buf += desc
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        for extent in arr.shape:
            buf += struct.pack("<I", extent)
        buf += arr.tobytes(order="C")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError("truncated container file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated container file")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError("checksum failure: container bytes are corrupted")
    reader = _Reader(data, len(data) - 4)
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a container file")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    desc_len = reader.u32()
    try:
        descriptor = json.loads(reader.take(desc_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable descriptor: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    while reader.pos < reader.end:
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return descriptor, tensors
