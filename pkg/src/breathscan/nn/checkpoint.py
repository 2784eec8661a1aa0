"""Binary checkpoint format (``.bsck``) plus a text manifest.

Layout (little-endian)::

    b"BSCK" | version u32 | config_len u32 | config JSON (utf-8)
    | n_arrays u32 | per array: name_len u16, name, ndim u8, dims u32 * ndim, float32 data

Input-normalization statistics are stored as the arrays ``_norm.mean`` and
``_norm.std``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import Detector, DetectorConfig

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"BSCK"
CHECKPOINT_VERSION = 1


def _arrays(model: Detector):
    yield from model.named_parameters()
    yield "_norm.mean", model.norm_mean
    yield "_norm.std", model.norm_std


def save_checkpoint(model: Detector, path, manifest: bool = True) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the written bytes."""
    cfg = model.cfg.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    arrays = list(_arrays(model))
    parts.append(struct.pack("<I", len(arrays)))
    for name, value in arrays:
        nb = name.encode()
        value = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    blob = b"".join(parts)
    path = Path(path)
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    if manifest:
        counts = Counter()
        for name, value in model.named_parameters():
            counts[name.split(".", 1)[0]] += value.size
        lines = [f"config_hash\t{model.cfg.digest()}", f"sha256\t{digest}",
                 f"total_parameters\t{model.num_parameters()}"]
        lines += [f"parameters.{k}\t{v}" for k, v in sorted(counts.items())]
        path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n")
    return digest


def load_checkpoint(path, dtype=np.float32) -> Detector:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    try:
        version, clen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        if pos + clen > len(data):
            raise FormatError(f"{path}: truncated config header")
        try:
            cfg = DetectorConfig.from_dict(json.loads(data[pos:pos + clen].decode()))
        except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: unreadable config header ({exc})") from None
        pos += clen
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nl].decode()
            pos += nl
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(data):
                raise FormatError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    model = Detector(cfg, seed=0, dtype=dtype)
    model.norm_mean = arrays.pop("_norm.mean").astype(np.float64)
    model.norm_std = arrays.pop("_norm.std").astype(np.float64)
    model.load_state({k: v.astype(dtype) for k, v in arrays.items()})
    return model
