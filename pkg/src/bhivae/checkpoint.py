"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BHIV"                       magic
    u32 version                   currently 1
    u32 n, n bytes                RunConfig as UTF-8 JSON
    u64 step
    u64 adam_t
    u32 count                     number of array records
    count x record:
        u32 n, n bytes            UTF-8 name
        u32 ndim, ndim x u32      shape
        prod(shape) x f32         values

Parameter records are named as in the model; Adam moments are stored as
``adam.m/<name>`` and ``adam.v/<name>``.  Records are written in sorted name
order so serialization is canonical.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BHIV"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_json: str
    params: dict[str, np.ndarray]
    step: int = 0
    adam_t: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)

    def records(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update({f"adam.m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.adam_v.items()})
        return out

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = ckpt.config_json.encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<QQ", ckpt.step, ckpt.adam_t)
    records = ckpt.records()
    out += struct.pack("<I", len(records))
    for name in sorted(records):
        arr = np.asarray(records[name])
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    (n,) = r.unpack("<I")
    config_json = r.take(n).decode("utf-8")
    step, adam_t = r.unpack("<QQ")
    (count,) = r.unpack("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(config_json, params, step, adam_t, m, v)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
