"""Flat binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"SPRGCKPT"
    version    u32       1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (model spec text, vocab, max_len, ...)
    count      u32       number of tensors
    count x:   name_len u16, name bytes (UTF-8), ndim u8, ndim x u32 dims
    payload    f32 LE    tensors concatenated in table order, C order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Module

MAGIC = b"SPRGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Module, meta: dict) -> None:
    named = model.named_params()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(named))]
    for name, p in named:
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.value.ndim))
        header.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
    with open(path, "wb") as f:
        f.write(b"".join(header))
        for _, p in named:
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        version, meta_len = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            table.append((name, shape))
        tensors = {}
        for name, shape in table:
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(data):
                raise CheckpointError("truncated checkpoint payload")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from exc
    return meta, tensors


def load_into(model: Module, tensors: dict[str, np.ndarray]) -> None:
    named = dict(model.named_params())
    if set(named) != set(tensors):
        raise CheckpointError("checkpoint tensors do not match the model")
    for name, p in named.items():
        if p.value.shape != tensors[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.value[...] = tensors[name]
