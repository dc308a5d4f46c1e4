"""Binary checkpoint format for ParamVector.

Layout (all integers little-endian)::

    b"FBAF"                      magic
    u16  version                 currently 1
    u32  num_classes
    u32  input_dim
    u32  layer count
    per layer:
        u32  name length, then UTF-8 name bytes
        u32  rank, then rank x u32 dims
        u64  MACs per sample
    float64[total] weights       schema order
    u32  CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import LayerSpec, ModelSchema, ParamVector

MAGIC = b"FBAF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: ParamVector) -> bytes:
    schema = params.schema
    out = bytearray(MAGIC)
    out += struct.pack("<HIII", VERSION, schema.num_classes, schema.input_dim, len(schema.layers))
    for layer in schema.layers:
        name = layer.name.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack(f"<I{len(layer.shape)}I", len(layer.shape), *layer.shape)
        out += struct.pack("<Q", layer.macs_per_sample)
    out += params.values.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode(blob: bytes) -> ParamVector:
    if len(blob) < 22 or blob[:4] != MAGIC:
        raise CheckpointError("not an FBAF checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch")
    version, num_classes, input_dim, count = struct.unpack_from("<HIII", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<HIII")
    layers = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            (macs,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            layers.append(LayerSpec(name, dims, macs))
    except struct.error as exc:
        raise CheckpointError(f"truncated layer table: {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"invalid layer table: {exc}") from None
    if pos > len(body) or (len(body) - pos) % 8:
        raise CheckpointError("weight payload does not match schema")
    try:
        schema = ModelSchema(tuple(layers), num_classes, input_dim)
    except ValueError as exc:
        raise CheckpointError(f"invalid layer table: {exc}") from None
    weights = np.frombuffer(body, dtype="<f8", offset=pos)
    if weights.size != schema.size or pos + 8 * schema.size != len(body):
        raise CheckpointError("weight payload does not match schema")
    return ParamVector(schema, weights.astype(np.float64))


def save(params: ParamVector, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(params))


def load(path: str | Path) -> ParamVector:
    return decode(Path(path).read_bytes())
