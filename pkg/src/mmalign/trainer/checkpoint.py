"""Binary checkpoint format.

Layout (little-endian)::

    b"MMMC"  u8 version
    u32 config_len, config JSON (utf-8, sorted keys)
    u64 step
    u32 n_params, then n_params entries
    u32 n_m,      then n_m entries       (Adam first moments)
    u32 n_v,      then n_v entries       (Adam second moments)

    entry: u16 name_len, name (utf-8), u8 ndim, ndim x u32 dims, float64 payload

Entries are written in sorted-name order so equal states give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ..minicore import OptimizerState

MAGIC = b"MMMC"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int = -1):
        super().__init__(f"{message} (offset {offset})" if offset >= 0 else message)
        self.offset = offset


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    config: dict = field(default_factory=dict)
    step: int = 0

    def equals(self, other: "Checkpoint") -> bool:
        return to_bytes(self) == to_bytes(other)


def _pack_entries(out: list, table: Dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(dict(ckpt.config, optimizer_step=ckpt.optimizer.step), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<Q", ckpt.step)]
    _pack_entries(out, ckpt.params)
    _pack_entries(out, ckpt.optimizer.m)
    _pack_entries(out, ckpt.optimizer.v)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def entries(self, what: str) -> Dict[str, np.ndarray]:
        (n,) = self.unpack("<I", f"{what} count")
        table = {}
        for _ in range(n):
            (ln,) = self.unpack("<H", "name length")
            name = self.take(ln, "name").decode("utf-8")
            (ndim,) = self.unpack("<B", f"{name} rank")
            dims: Tuple[int, ...] = self.unpack(f"<{ndim}I", f"{name} dims")
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = self.take(8 * count, f"{name} payload")
            table[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        return table


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint", 0)
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    (clen,) = r.unpack("<I", "config length")
    try:
        config = json.loads(r.take(clen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"config blob is not valid JSON: {e}", 9) from e
    (step,) = r.unpack("<Q", "step")
    params = r.entries("parameter")
    m = r.entries("first-moment")
    v = r.entries("second-moment")
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    if not isinstance(config, dict):
        raise CheckpointFormatError("config blob must be a JSON object", 9)
    opt_step = int(config.pop("optimizer_step", 0))
    return Checkpoint(params, OptimizerState(opt_step, m, v), config, step)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(os.fspath(path), "rb") as f:
        return from_bytes(f.read())
