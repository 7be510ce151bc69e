"""Binary checkpoint container.

Layout (little-endian)::

    magic      8 bytes  b"TBCOUGH\\0"
    version    u16
    arch       u16 length + utf-8
    meta       u32 length + utf-8 JSON (epoch, fold, seed, model settings)
    count      u32
    records    count x (u16 name length, utf-8 name, u8 ndim, ndim x u32 dims,
                        float32 data)
    crc32      u32 over everything above
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .models import ModelParams

MAGIC = b"TBCOUGH\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    arch = params.arch.encode()
    parts.append(struct.pack("<H", len(arch)) + arch)
    meta = json.dumps(params.meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    parts.append(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}; checkpoints hold float32")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, expect_arch: str | None = None) -> ModelParams:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<H")
    arch = r.take(n).decode()
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"architecture mismatch: file holds {arch}, expected {expect_arch}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[:body_end]):
        raise CheckpointError("checkpoint corrupted (checksum mismatch)")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return ModelParams(arch, tensors, meta)


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(params: ModelParams, path) -> None:
    atomic_write(path, encode(params))


def load_checkpoint(path, expect_arch: str | None = None) -> ModelParams:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf, expect_arch)
