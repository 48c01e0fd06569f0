"""
Binary checkpoint format::

    b"PAVT"                       magic
    u16                           format version
    u32 n, n bytes                UTF-8 JSON {"config": ..., "params": [names...]} (sorted keys)
    per parameter, in declaration order:
        u32 ndim, ndim x u32 dims, prod(dims) x float64

All integers and floats are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import PoseAwareViT
from .config import ModelConfig
from .errors import ConfigError, DataError

MAGIC = b"PAVT"
VERSION = 1


def encode(model: PoseAwareViT) -> bytes:
    params = model.named_parameters()
    header = json.dumps({"config": model.cfg.to_dict(), "params": [k for k, _ in params]},
                        sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    for _, p in params:
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_save(model: PoseAwareViT, path) -> None:
    Path(path).write_bytes(encode(model))


def _first_difference(expected: dict, found: dict, prefix: str = "") -> str | None:
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key), found.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            sub = _first_difference(a, b, f"{prefix}{key}.")
            if sub:
                return sub
        elif a != b:
            return f"{prefix}{key}"
    return None


def decode(raw: bytes, expected: ModelConfig | None = None, source: str = "<bytes>") -> PoseAwareViT:
    if raw[:4] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic {raw[:4]!r})")
    off = 4
    try:
        (version,) = struct.unpack_from("<H", raw, off)
        off += 2
        if version != VERSION:
            raise DataError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off:off + n].decode())
        off += n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: corrupt header: {exc}") from exc
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None and cfg != expected:
        field = _first_difference(expected.to_dict(), cfg.to_dict())
        raise ConfigError(f"{source}: checkpoint config differs from expected at {field!r}", field=field)
    model = PoseAwareViT(cfg)
    own = model.named_parameters()
    if [k for k, _ in own] != header["params"]:
        raise DataError(f"{source}: parameter list does not match the architecture of its config")
    for name, p in own:
        try:
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
        except struct.error as exc:
            raise DataError(f"{source}: truncated at parameter {name}") from exc
        if tuple(dims) != p.shape:
            raise DataError(f"{source}: parameter {name} has shape {tuple(dims)}, expected {p.shape}")
        count = int(np.prod(dims))
        if off + 8 * count > len(raw):
            raise DataError(f"{source}: truncated at parameter {name}")
        p.data[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
    if off != len(raw):
        raise DataError(f"{source}: {len(raw) - off} trailing bytes")
    return model


def checkpoint_load(path, expected: ModelConfig | None = None) -> PoseAwareViT:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(raw, expected, str(path))
