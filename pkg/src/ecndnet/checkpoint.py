"""Binary checkpoint format (little-endian, version 1).

Layout::

    "ECND"  u16 version  u8 variant  u16 depth  u16 width  f32 sigma
    per layer:
        u8 kind  u8 dilation  u8 n_tensors
        n_tensors x (4 x u32 dims, f32 payload)
            order: weights, bias?, gamma?, beta?, running_mean?, running_var?
    u32 length + UTF-8 JSON metadata (training config, BN constants, epoch)
    u8 has_adam
        [u64 t, then m and v (dims + payload) for every learnable array
         in Model.parameters() order]
    u32 CRC-32 of every preceding byte

Vectors are stored with dims (len, 1, 1, 1).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from . import network as N
from .errors import (
    BadMagicError,
    ChecksumMismatchError,
    CheckpointFormatError,
    DataError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .training import AdamState, TrainConfig

MAGIC = b"ECND"
VERSION = 1
_HEADER = struct.Struct("<4sHBHHf")
_LAYER = struct.Struct("<BBB")
_DIMS = struct.Struct("<4I")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: N.Model
    adam: Optional[AdamState] = None
    config: Optional[TrainConfig] = None
    epoch: int = 0  # completed epochs


def _pack_tensor(a: np.ndarray) -> bytes:
    dims = a.shape if a.ndim == 4 else (a.shape[0], 1, 1, 1)
    return _DIMS.pack(*dims) + np.ascontiguousarray(a, dtype=_F32).tobytes()


def _layer_tensors(layer: N.Layer) -> list[np.ndarray]:
    tensors = [layer.conv.weights]
    if layer.conv.bias is not None:
        tensors.append(layer.conv.bias)
    if layer.bn is not None:
        tensors += [layer.bn.gamma, layer.bn.beta, layer.bn.running_mean, layer.bn.running_var]
    return tensors


def dumps(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    spec = model.spec
    sigma = ckpt.config.sigma if ckpt.config is not None else 0.0
    out = [_HEADER.pack(MAGIC, VERSION, int(spec.variant), spec.depth, spec.width, sigma)]
    for layer in model.layers:
        tensors = _layer_tensors(layer)
        out.append(_LAYER.pack(int(layer.spec.kind), layer.spec.dilation, len(tensors)))
        out += [_pack_tensor(t) for t in tensors]

    bn = next((layer.bn for layer in model.layers if layer.bn is not None), None)
    meta = {
        "epoch": ckpt.epoch,
        "config": ckpt.config.to_dict() if ckpt.config is not None else None,
        "bn_momentum": bn.momentum if bn else None,
        "bn_eps": bn.eps if bn else None,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out.append(struct.pack("<I", len(blob)) + blob)

    if ckpt.adam is not None and ckpt.adam.m:
        out.append(struct.pack("<BQ", 1, ckpt.adam.t))
        for name, _ in model.parameters():
            out.append(_pack_tensor(ckpt.adam.m[name]) + _pack_tensor(ckpt.adam.v[name]))
    else:
        out.append(struct.pack("<B", 0))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model: N.Model, state: Optional[AdamState] = None, config: Optional[TrainConfig] = None,
                    epoch: int = 0) -> None:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    path = Path(path)
    data = dumps(Checkpoint(model, state, config, epoch))
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} (need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))

    def tensor(self, what: str) -> np.ndarray:
        dims = self.unpack(_DIMS, f"{what} dims")
        count = int(np.prod(dims, dtype=np.int64))
        payload = self.take(4 * count, f"{what} payload")
        return np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(dims)


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"not an ECNDNet checkpoint (magic {data[:4]!r})")
    magic, version, variant_id, depth, width, _sigma = r.unpack(_HEADER, "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    try:
        variant = N.Variant(variant_id)
    except ValueError:
        raise CheckpointFormatError(f"unknown variant id {variant_id}") from None

    specs, raw_layers = [], []
    for i in range(depth):
        what = f"layer {i + 1}"
        kind_id, dilation, count = r.unpack(_LAYER, f"{what} record")
        try:
            kind = N.LayerKind(kind_id)
        except ValueError:
            raise CheckpointFormatError(f"{what}: unknown layer kind {kind_id}") from None
        tensors = [r.tensor(f"{what} tensor {j}") for j in range(count)]
        w = tensors[0]
        specs.append(N.LayerSpec(kind, dilation, w.shape[1], w.shape[0]))
        raw_layers.append(tensors)

    (blob_len,) = r.unpack(struct.Struct("<I"), "metadata length")
    try:
        meta = json.loads(r.take(blob_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt metadata: {exc}") from None

    try:
        spec = N.ArchitectureSpec(variant, depth, width, tuple(specs))
    except Exception as exc:
        raise CheckpointFormatError(f"inconsistent layer schedule: {exc}") from None
    layers = []
    for i, (ls, tensors) in enumerate(zip(specs, raw_layers)):
        expected = 1 + ls.has_bias + 4 * ls.kind.has_bn
        if len(tensors) != expected:
            raise CheckpointFormatError(f"layer {i + 1}: expected {expected} tensors, found {len(tensors)}")
        vec = [t.reshape(-1) for t in tensors[1:]]
        bias = vec.pop(0) if ls.has_bias else None
        bn = None
        if ls.kind.has_bn:
            bn = L.BatchNormParams(*vec, momentum=meta.get("bn_momentum") or 0.9, eps=meta.get("bn_eps") or 1e-5)
        layers.append(N.Layer(ls, L.Conv2dParams(tensors[0], bias, ls.dilation), bn))
    model = N.Model(spec, layers)

    (has_adam,) = r.unpack(struct.Struct("<B"), "optimizer flag")
    adam = None
    if has_adam:
        (t,) = r.unpack(struct.Struct("<Q"), "optimizer step count")
        adam = AdamState(t=t)
        for name, p in model.parameters():
            adam.m[name] = r.tensor(f"optimizer first moment of {name}").reshape(p.shape)
            adam.v[name] = r.tensor(f"optimizer second moment of {name}").reshape(p.shape)

    body_end = r.pos
    (crc,) = r.unpack(struct.Struct("<I"), "checksum")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} unexpected trailing bytes")
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumMismatchError("checkpoint checksum mismatch")

    config = TrainConfig.from_dict(meta["config"]) if meta.get("config") else None
    return Checkpoint(model, adam, config, int(meta.get("epoch", 0)))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
