"""``RFL1`` checkpoint files.

Layout (all integers and floats little-endian)::

    b"RFL1"
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u64 dims, float64 data
    u32 metadata_len, metadata (UTF-8 JSON)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..model import ParamSet

MAGIC = b"RFL1"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class Checkpoint:
    params: ParamSet
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def encode(params: Mapping[str, np.ndarray], metadata: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes", 0)
    count = r.u32("tensor count")
    params = ParamSet()
    for i in range(count):
        start = r.pos
        name_raw = r.take(r.u32(f"name length of tensor {i}"), f"name of tensor {i}")
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor {i} name is not UTF-8", start + 4) from exc
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = r.take(8 * size, f"data of {name}")
        params[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    meta_len = r.u32("metadata length")
    meta_start = r.pos
    raw = r.take(meta_len, "metadata")
    try:
        metadata = json.loads(raw.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("metadata is not valid UTF-8 JSON", meta_start) from exc
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after metadata", r.pos)
    return Checkpoint(params, metadata)


def save_checkpoint(params: Mapping[str, np.ndarray], metadata: dict | None, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params, metadata))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
