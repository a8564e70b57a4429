"""Versioned named-tensor archive.

Layout (little-endian)::

    b"ECNT" | u32 version | u32 len | config text (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name len | name | u8 dtype tag (0=f32, 1=f64) | u32 rank | u32 extents... | payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"ECNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    text = json.dumps(ckpt.meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated archive")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an ECNT checkpoint")
    version, n_text = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    try:
        meta = json.loads(r.take(n_text).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<I")
        name = r.take(n_name).decode()
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


def state_dict(module, prefix: str = "model.") -> Dict[str, np.ndarray]:
    return {prefix + k: v.data.copy() for k, v in module.parameters().items()}


def load_state(module, tensors: Dict[str, np.ndarray], prefix: str = "model.") -> None:
    """Copy archived tensors into ``module``; unknown or missing names are errors."""
    params = module.parameters()
    names = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    unknown = names - params.keys()
    if unknown:
        raise CheckpointError(f"unknown tensor names: {sorted(unknown)[:5]}")
    missing = params.keys() - names
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for k, p in params.items():
        src = tensors[prefix + k]
        if src.shape != p.shape:
            raise CheckpointError(f"tensor {k}: shape {src.shape} vs model {p.shape}")
        p.data[...] = src
