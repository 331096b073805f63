"""Parameter checkpoints.

Layout (little-endian): ``ISCK`` | version u16 | header length u32 | UTF-8
JSON header (model config, layer-spec chain, extra metadata) | tensor count
u32 | per tensor: name length u16, UTF-8 name, rank u16, rank x dim u32, f32
payload.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .dualpath import DualPathConfig, DualPathNet

MAGIC = b"ISCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _layer_chain(cfg: DualPathConfig) -> dict[str, list[str]]:
    return {path: [s.describe() for s in specs] for path, specs in cfg.layer_specs().items()}


def save_checkpoint(model: DualPathNet, path, extra: dict | None = None) -> None:
    header = {"config": model.cfg.to_dict(), "layers": _layer_chain(model.cfg), "model_version": model.version}
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(blob))
    out += blob
    params = model.params()
    out += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<H", p.value.ndim)
        out += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += np.ascontiguousarray(p.value, dtype="<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(raw[pos : pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, "<f4", n, pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header, tensors


def load_checkpoint(path, cfg: DualPathConfig | None = None) -> DualPathNet:
    """Rebuild the model stored at path; with ``cfg`` given, reject architecture mismatches."""
    header, tensors = read_checkpoint(path)
    stored = DualPathConfig.from_dict(header["config"])
    if cfg is not None:
        if _layer_chain(cfg) != header["layers"] or cfg.to_dict() != stored.to_dict():
            raise CheckpointError(f"{path}: architecture in checkpoint does not match the requested config")
    model = DualPathNet(stored, np.random.default_rng(0))
    try:
        model.load_state(tensors)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.version = int(header.get("model_version", 0))
    return model
