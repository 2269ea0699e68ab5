"""Binary model checkpoints.

Layout (all integers little-endian uint32 unless noted):

    magic   4 bytes  b"GCN1"
    version u32      currently 1
    clen    u32      length of the config block
    config  clen bytes, utf-8 "key=value" lines (sorted keys)
    count   u32      number of named tensors
    then per tensor, in sorted name order:
    nlen    u32      name length
    name    nlen bytes utf-8
    rank    u32
    extents rank x u32
    data    prod(extents) x 4 bytes, IEEE float32 little-endian

Learnable tensors and batch-norm running buffers are both stored. Round-trip
of a float32 model is bit-exact; models held in float64 are stored at
float32 per the format.
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Tuple

import numpy as np

from .tensor import Tensor
from .model import ModelConfig, ModelParams, layer_specs

MAGIC = b"GCN1"
VERSION = 1

_CONFIG_INT_FIELDS = ("f", "dmax", "height", "width", "in_channels")
_CONFIG_STR_FIELDS = ("variant", "loss_kind")


def _config_block(config: ModelConfig) -> bytes:
    items = {name: getattr(config, name) for name in _CONFIG_INT_FIELDS + _CONFIG_STR_FIELDS}
    return "".join(f"{k}={items[k]}\n" for k in sorted(items)).encode("utf-8")


def _parse_config_block(blob: bytes) -> ModelConfig:
    fields: Dict[str, str] = {}
    for line in blob.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    kwargs = {}
    for name in _CONFIG_INT_FIELDS:
        kwargs[name] = int(fields[name])
    for name in _CONFIG_STR_FIELDS:
        kwargs[name] = fields[name]
    return ModelConfig(**kwargs).validate()


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Write params (learnables + running stats) to path atomically."""
    tensors: Dict[str, np.ndarray] = {}
    for name, t in params.named().items():
        tensors[name] = t.data
    tensors.update(params.buffers())

    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _config_block(params.config)
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset "
                f"{self.pos}, file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str) -> ModelParams:
    """Read a checkpoint back into ModelParams (float32 tensors)."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    clen = r.u32("config length")
    config = _parse_config_block(r.take(clen, "config block"))
    count = r.u32("tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        rank = r.u32("rank")
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        size = int(np.prod(extents)) if rank else 1
        payload = r.take(4 * size, f"data of {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(extents).copy()
        tensors[name] = arr
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes at offset {r.pos}")
    return _rebuild(config, tensors)


def _rebuild(config: ModelConfig, tensors: Dict[str, np.ndarray]) -> ModelParams:
    specs = layer_specs(config)
    layers: Dict[int, Dict[str, object]] = {}
    for lid, spec in specs.items():
        lp: Dict[str, object] = {}
        base = f"layer{lid:02d}"
        wanted: Tuple[Tuple[str, str, bool], ...] = (
            ("w", "weight", True), ("b", "bias", True))
        if spec.bn:
            wanted += (("gamma", "gamma", True), ("beta", "beta", True),
                       ("rm", "running_mean", False), ("rv", "running_var", False))
        for field, suffix, learnable in wanted:
            name = f"{base}.{suffix}"
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name}")
            arr = tensors.pop(name)
            expect = (spec.conv_spec().weight_shape(spec.in_channels)
                      if field == "w" else (spec.out_channels,))
            if arr.shape != expect:
                raise CheckpointError(
                    f"tensor {name} has shape {arr.shape}, config implies {expect}")
            lp[field] = Tensor(arr, requires_grad=True) if learnable else arr
        layers[lid] = lp
    if tensors:
        raise CheckpointError(f"checkpoint has unexpected tensors: {sorted(tensors)}")
    return ModelParams(config, layers)
