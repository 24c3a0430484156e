"""SOEC binary checkpoints: named float32 tensors plus batchnorm running statistics.

Layout (all integers little-endian)::

    "SOEC" | u32 version=1 | u32 param_count | param_count * entry
           | u32 stat_count | stat_count * entry
    entry = u16 name_len | utf-8 name | u8 rank | rank * u32 extent | f32 data
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import FormatError, Reader, atomic_write

SOEC_MAGIC = b"SOEC"
SOEC_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()})

    def num_parameters(self, prefix: str = "") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.params.keys() == other.params.keys() and self.stats.keys() == other.stats.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
                and all(np.array_equal(self.stats[k], other.stats[k]) for k in self.stats))


def _pack_entries(entries: dict[str, np.ndarray]) -> list[bytes]:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} does not fit in a u8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out


def _unpack_entries(rd: Reader) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", rd.take(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", rd.take(2))
        try:
            name = rd.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"tensor name is not valid UTF-8: {exc}") from exc
        (rank,) = struct.unpack("<B", rd.take(1))
        shape = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(rd.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [SOEC_MAGIC, struct.pack("<I", SOEC_VERSION)]
    parts += _pack_entries(ckpt.params)
    parts += _pack_entries(ckpt.stats)
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    rd = Reader(buf, "SOEC checkpoint")
    if rd.take(4) != SOEC_MAGIC:
        raise FormatError("not a SOEC checkpoint (bad magic)")
    (version,) = struct.unpack("<I", rd.take(4))
    if version != SOEC_VERSION:
        raise FormatError(f"unsupported SOEC version {version}")
    params = _unpack_entries(rd)
    stats = _unpack_entries(rd)
    if not rd.done():
        raise FormatError("trailing bytes after SOEC checkpoint")
    return Checkpoint(params, stats)


def save(path, ckpt: Checkpoint) -> None:
    atomic_write(path, to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
