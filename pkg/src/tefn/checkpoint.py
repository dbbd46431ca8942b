"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TEFN"                      magic
    u32   version                 (currently 1)
    u32   n, n bytes              model config as UTF-8 JSON, sorted keys
    u32   tensor count
    per tensor:
      u32 n, n bytes              name (UTF-8)
      u32 ndim, ndim x u64        shape
      prod(shape) x f64           values, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import TefnConfig, TefnParams, param_shapes

MAGIC = b"TEFN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class Truncated(CheckpointError):
    pass


def _config_bytes(config: TefnConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")


def encode(params: TefnParams, config: TefnConfig) -> bytes:
    cfg = _config_bytes(config)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    tensors = params.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: TefnParams, config: TefnConfig, path) -> int:
    """Write the checkpoint; returns its size in bytes."""
    blob = encode(params, config)
    Path(path).write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise Truncated(f"checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(blob: bytes):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagic("not a TEFN checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, reader supports {VERSION}")
    (n,) = r.unpack("<I")
    config = TefnConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return TefnParams.from_tensors(tensors), config


def load_checkpoint(path):
    return decode(Path(path).read_bytes())


def checkpoint_size(config: TefnConfig) -> int:
    """Predicted file size from the config alone."""
    size = 4 + 4 + 4 + len(_config_bytes(config)) + 4
    for name, shape in param_shapes(config).items():
        size += 4 + len(name.encode("utf-8")) + 4 + 8 * len(shape) + 8 * int(np.prod(shape))
    return size
