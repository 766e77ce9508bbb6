"""Flat binary container for named float64 tensors.

Layout (little-endian):
    magic      4 bytes  b"GZDN"
    version    uint32
    count      uint32
    per tensor:
        name_len  uint16, name (utf-8)
        ndim      uint8, shape (uint64 * ndim)
        data      float64 * prod(shape), C order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import SchemaError

MAGIC = b"GZDN"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise SchemaError("not a denoiser parameter file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise SchemaError(f"unsupported parameter file version {version}")
    pos = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise SchemaError("trailing bytes in parameter file")
    return tensors


def save_model(path, model) -> None:
    tensors = dict(model.params)
    tensors["meta.velocity_scale"] = np.asarray(model.velocity_scale)
    Path(path).write_bytes(dumps(tensors))


def load_model(path):
    from .denoiser import ReferenceDenoiser

    tensors = loads(Path(path).read_bytes())
    scale = float(tensors.pop("meta.velocity_scale", 100.0))
    for name in [k for k in tensors if k.startswith("meta.")]:
        tensors.pop(name)
    return ReferenceDenoiser(tensors, scale)
