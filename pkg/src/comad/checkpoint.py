"""Checkpoint container.

Layout (little-endian)::

    b"CMCK" | u32 version | 32-byte config digest | u32 tensor count
    per tensor: u16 name length | name (UTF-8) | u8 dtype tag | u8 rank | rank x u32 dims | payload
    u32 rng length | rng state (UTF-8 JSON) | u64 step | u32 CRC-32 of all preceding bytes
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CMCK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_digest: bytes = bytes(32)
    rng_state: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def _encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), ckpt.config_digest, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    meta = {"rng": ckpt.rng_state, "extra": ckpt.extra}
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(raw_meta)) + raw_meta)
    parts.append(struct.pack("<Q", ckpt.step))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    data = _encode(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 4 + 4 + 32 + 4 + 4:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    r = _Reader(body, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    digest = r.take(32)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        dt = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    (step,) = r.unpack("<Q")
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")
    return Checkpoint(tensors, digest, meta.get("rng"), step, meta.get("extra") or {})
