"""Checkpoint file format.

Layout (all integers little-endian):
    magic   4 bytes  "BFCK"
    version u32      currently 1
    cfg_len u32      length of the UTF-8 JSON config document
    config  bytes    {"model": {...}, "meta": {...}}
    count   u32      number of named tensors
    per tensor:
        name_len u32, name utf-8, rank u32, dims u32 x rank, f32 data
Model parameters are stored under their plain names; optimizer moments and
the EMA shadow use the prefixes "opt.m.", "opt.v.", and "ema.".
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ByteFormerConfig
from .tensor import Tensor

MAGIC = b"BFCK"
VERSION = 1


def save_checkpoint(path, cfg: ByteFormerConfig, tensors: dict, meta: dict | None = None):
    """Write named tensors plus the model config (and optional metadata)."""
    doc = json.dumps({"model": cfg.to_dict(), "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(doc)))
        f.write(doc)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            data = np.ascontiguousarray(data, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config, tensor dict of float32 arrays, meta)."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    version, doc_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    doc = json.loads(blob[pos:pos + doc_len].decode("utf-8"))
    pos += doc_len
    cfg = ByteFormerConfig.from_dict(doc["model"])
    (count,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        dims = struct.unpack(f"<{rank}I", blob[pos:pos + 4 * rank])
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob[pos:pos + 4 * size], dtype="<f4").reshape(dims)
        pos += 4 * size
        tensors[name] = data.copy()
    return cfg, tensors, doc.get("meta", {})


def params_from_tensors(tensors: dict) -> dict:
    """Model parameters (plain names) as trainable Tensors; skips opt/ema state."""
    return {name: Tensor(data, requires_grad=True, name=name)
            for name, data in tensors.items()
            if not name.startswith(("opt.", "ema."))}
