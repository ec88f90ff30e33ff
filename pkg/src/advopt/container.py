"""Binary checkpoint container shared by classifier and optimizer state.

Layout (all integers little-endian uint32 unless noted):

    magic   4 bytes  b"ROPT"
    version u32      currently 1
    meta    u32 length + UTF-8 JSON (kind, shapes, hyper-parameters)
    count   u32      number of tensors
    tensor  u32 name length + name bytes
            u32 ndim + ndim * u32 dims
            row-major float64 little-endian payload

Reads validate the magic, version, and that the payload is exactly
consumed, so truncated or padded files are rejected.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"ROPT"
VERSION = 1


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError("truncated checkpoint file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt metadata: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = np.ascontiguousarray(data, dtype=np.float64)
    if r.pos != len(buf):
        raise DataFormatError(f"{path}: trailing bytes after checkpoint payload")
    return meta, tensors
