"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"DDFL"  u32 version  u32 block count
    per block: u16 name length, UTF-8 name, u32 ndim, u32 * ndim shape
    u64 value count, f64 * count payload
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DDFL"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    layout: list
    values: np.ndarray

    @classmethod
    def from_params(cls, params):
        return cls([(name, shape) for name, _, shape in params.layout], params.copy_values())

    def check_against(self, params):
        mine = [(n, tuple(s)) for n, s in self.layout]
        theirs = [(n, tuple(s)) for n, _, s in params.layout]
        if mine != theirs:
            raise CheckpointError("checkpoint layout does not match the model")

    def restore(self, params):
        self.check_against(params)
        params.set_values(self.values)


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.layout))]
    for name, shape in ckpt.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    vals = np.asarray(ckpt.values, dtype="<f8")
    parts.append(struct.pack("<Q", vals.size))
    parts.append(vals.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 24 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    try:
        version, nblocks = struct.unpack_from("<II", body, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        layout = []
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            layout.append((name, tuple(shape)))
        (count,) = struct.unpack_from("<Q", body, pos)
        pos += 8
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from None
    if count != sum(math.prod(s) for _, s in layout):
        raise CheckpointError("payload length does not match the dim table")
    if len(body) - pos != 8 * count:
        raise CheckpointError("payload size mismatch")
    values = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(float)
    return Checkpoint(layout, values)


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
