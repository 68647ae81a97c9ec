"""Versioned binary checkpoint format.

Layout: magic ``SMNN`` | u16 version (LE) | u32 header length (LE) |
UTF-8 JSON header describing the architecture and dtype | f64 LE
normalization mean | raw f64 LE parameter blocks in layer order (weights
then bias per parameterized layer) | 32-byte SHA-256 of everything before
it. The header is self-describing: loading needs no external spec object.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..dataset import NormalizationStats
from ..errors import CheckpointError
from .arch import ArchitectureSpec, LayerSpec
from .network import Network, build

MAGIC = b"SMNN"
VERSION = 1


def _spec_to_dict(spec: ArchitectureSpec) -> dict:
    layers = []
    for ls in spec.layers:
        entry = {k: v for k, v in asdict(ls).items() if v is not None}
        layers.append(entry)
    return {
        "name": spec.name,
        "input": list(spec.input_shape),
        "class_count": spec.class_count,
        "layers": layers,
    }


def _spec_from_dict(d: dict) -> ArchitectureSpec:
    return ArchitectureSpec(
        name=d["name"],
        layers=tuple(LayerSpec(**entry) for entry in d["layers"]),
        input_shape=tuple(d["input"]),
        class_count=d["class_count"],
    )


def save_checkpoint(net: Network, stats: NormalizationStats, path) -> None:
    header = _spec_to_dict(net.spec)
    header["dtype"] = np.dtype(net.dtype).name
    header_bytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<d", stats.mean)
    for _, layer, name in net.parameters():
        blob += getattr(layer, name).astype("<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[Network, NormalizationStats]:
    data = Path(path).read_bytes()
    if len(data) < 4 + 2 + 4 + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    digest = data[-32:]
    body = data[:-32]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: digest mismatch, file corrupted")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", body, 6)
    offset = 10
    try:
        header = json.loads(body[offset : offset + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset += header_len
    (mean,) = struct.unpack_from("<d", body, offset)
    offset += 8
    dtype = np.dtype(header.get("dtype", "float64"))
    spec = _spec_from_dict(header)
    net = build(spec, seed=0, dtype=dtype)
    for _, layer, name in net.parameters():
        param = getattr(layer, name)
        nbytes = param.size * 8
        block = body[offset : offset + nbytes]
        if len(block) != nbytes:
            raise CheckpointError(f"{path}: parameter block truncated")
        values = np.frombuffer(block, dtype="<f8").reshape(param.shape)
        setattr(layer, name, values.astype(dtype))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return net, NormalizationStats(mean)
