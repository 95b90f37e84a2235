"""Binary checkpoint format for ParamSets.

Layout (little-endian)::

    b"BEEC"  u32 version  u32 count
    count x ( u32 name_len, utf-8 name, u32 rank, rank x u32 dim, f64 payload )
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamSet

MAGIC = b"BEEC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(ps: ParamSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ps))]
    for name, arr in ps.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated at byte {self.pos}: need {n} bytes for {what}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> ParamSet:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic at byte 0: {magic!r} (expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at byte 4")
    count = r.u32("tensor count")
    entries = []
    for i in range(count):
        name_len = r.u32(f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid utf-8 name for tensor {i} ending at byte {r.pos}") from exc
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n, f"payload of {name!r}")
        entries.append((name, np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after byte {r.pos}")
    return ParamSet(entries)


def save_checkpoint(ps: ParamSet, path) -> None:
    Path(path).write_bytes(encode(ps))


def load_checkpoint(path) -> ParamSet:
    return decode(Path(path).read_bytes())
