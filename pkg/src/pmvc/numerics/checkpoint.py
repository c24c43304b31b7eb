"""PMCK checkpoint files.

Layout (little-endian)::

    b"PMCK"  u16 version  u8 flags(bit0: optimizer moments present)  u32 entry count
    per entry:  u16 name length, UTF-8 name, u32 rank, rank x u32 extents,
                raw float32 values
                [if moments: m values, v values, u32 step]
    u32 config length, UTF-8 JSON config

Entries cover trainable parameters and buffers (batch-norm running stats);
buffers never carry moments.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PMCK"
VERSION = 1
FLAG_MOMENTS = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointEntry:
    value: np.ndarray
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


@dataclass
class CheckpointData:
    entries: dict[str, CheckpointEntry]
    config: dict = field(default_factory=dict)
    has_moments: bool = False


def state_from_module(module, config: dict | None = None, with_moments: bool = False) -> CheckpointData:
    entries: dict[str, CheckpointEntry] = {}
    for name, p in module.named_parameters():
        if with_moments:
            entries[name] = CheckpointEntry(p.data, p.m, p.v, p.step)
        else:
            entries[name] = CheckpointEntry(p.data)
    for name, buf in module.named_buffers():
        entries["buffer:" + name] = CheckpointEntry(buf)
    return CheckpointData(entries, dict(config or {}), with_moments)


def load_into_module(module, data: CheckpointData) -> None:
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    expected = set(params) | {"buffer:" + k for k in buffers}
    if expected != set(data.entries):
        missing = sorted(expected - set(data.entries))
        extra = sorted(set(data.entries) - expected)
        raise CheckpointError(f"checkpoint does not match model (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in params.items():
        entry = data.entries[name]
        if entry.value.shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {entry.value.shape} != model {p.data.shape}")
        p.data[...] = entry.value
        if entry.m is not None:
            p.m[...] = entry.m
            p.v[...] = entry.v
            p.step = entry.step
    for name, buf in buffers.items():
        buf[...] = data.entries["buffer:" + name].value


def _encode_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dumps(data: CheckpointData) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBI", VERSION, FLAG_MOMENTS if data.has_moments else 0, len(data.entries))
    for name in sorted(data.entries):
        entry = data.entries[name]
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<I", entry.value.ndim)
        out += struct.pack(f"<{entry.value.ndim}I", *entry.value.shape)
        out += _encode_array(entry.value)
        if data.has_moments:
            is_param = not name.startswith("buffer:")
            m = entry.m if is_param and entry.m is not None else np.zeros_like(entry.value)
            v = entry.v if is_param and entry.v is not None else np.zeros_like(entry.value)
            out += _encode_array(m) + _encode_array(v) + struct.pack("<I", entry.step)
    cfg = json.dumps(data.config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> CheckpointData:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a PMCK checkpoint (bad magic)")
    version, flags, count = r.unpack("<HBI")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    has_moments = bool(flags & FLAG_MOMENTS)
    entries = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))

        def read_array():
            return np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)

        value = read_array()
        entry = CheckpointEntry(value)
        if has_moments:
            entry.m, entry.v = read_array(), read_array()
            (entry.step,) = r.unpack("<I")
        entries[name] = entry
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    return CheckpointData(entries, config, has_moments)


def save(path: str | Path, data: CheckpointData) -> None:
    Path(path).write_bytes(dumps(data))


def load(path: str | Path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def model_hash(data: CheckpointData) -> bytes:
    """8-byte digest of the inference-relevant content (values + config, no moments)."""
    h = hashlib.sha256()
    for name in sorted(data.entries):
        value = data.entries[name].value
        h.update(name.encode("utf-8"))
        h.update(struct.pack(f"<{value.ndim}I", *value.shape))
        h.update(_encode_array(value))
    h.update(json.dumps(data.config, sort_keys=True).encode("utf-8"))
    return h.digest()[:8]
