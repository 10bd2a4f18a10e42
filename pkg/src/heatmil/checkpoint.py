"""Model checkpoint format "INSM".

Layout (integers u32 little-endian, tensor data float32 little-endian)::

    magic b"INSM"
    u32 format version (1)
    u32 config length L, then L bytes of UTF-8 JSON (ModelConfig, sorted keys)
    u32 parameter count P
    P records:
        u32 name length, name (UTF-8)
        u32 rank R, R x u32 extents
        prod(extents) float32 values, C-order
    EOF

Parameters appear in the model's canonical order.  Gradients and optimizer
state are not stored.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .formats import _Reader, atomic_write
from .model import ModelConfig, ModelParams
from .tensor import GradPair

CKPT_MAGIC = b"INSM"
CKPT_VERSION = 1


def encode_checkpoint(params: ModelParams) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params.tensors))]
    for name, pair in params.tensors.items():
        raw = name.encode()
        v = pair.value
        parts.append(struct.pack(f"<I{len(raw)}sI{v.ndim}I", len(raw), raw, v.ndim, *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> ModelParams:
    rd = _Reader(buf)
    if rd.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, expected b'INSM'", 0)
    at = rd.pos
    version = rd.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", at)
    n = rd.u32("config length")
    at = rd.pos
    try:
        config = ModelConfig.from_dict(json.loads(rd.take(n, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise FormatError(f"invalid model config: {exc}", at) from None
    count = rd.u32("parameter count")
    tensors = {}
    for i in range(count):
        name_at = rd.pos
        name = rd.take(rd.u32(f"name length of parameter {i}"), f"name of parameter {i}").decode("utf-8", "replace")
        if name in tensors:
            raise FormatError(f"duplicate parameter {name!r}", name_at)
        rank = rd.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", rd.pos - 4)
        shape = tuple(rd.u32(f"extent of {name}") for _ in range(rank))
        size = math.prod(shape)
        data = np.frombuffer(rd.take(4 * size, f"data of {name}"), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = GradPair(data)
    if rd.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", rd.pos)
    try:
        return ModelParams(config, tensors)
    except (ConfigError, DimensionError) as exc:
        raise FormatError(f"parameters do not match the stored config: {exc}") from None


def save_checkpoint(path, params: ModelParams):
    atomic_write(path, encode_checkpoint(params))


def load_checkpoint(path) -> ModelParams:
    return decode_checkpoint(Path(path).read_bytes())
