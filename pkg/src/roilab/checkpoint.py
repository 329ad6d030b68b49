"""Binary model checkpoints.

Layout (all integers little-endian)::

    b"RALB"                      magic
    u16                          format version (1)
    u32 + bytes                  header: UTF-8 JSON {"variant", "config", "records"}
    records, each:
        u16 + bytes              name (UTF-8)
        u8                       rank
        u32 * rank               dims
        f32 * prod(dims)         values

Records hold every parameter followed by every normalization layer's
running statistics (``<layer>/running_mean``, ``<layer>/running_var``).
Loading parses the whole file before building anything, so a bad file never
yields a partially loaded model.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .models import BackboneConfig, Model, ModelVariant, build_model

MAGIC = b"RALB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_arrays(model: Model):
    for name, p in model.params.items():
        yield name, p.value.data
    for name, s in model.bn_states.items():
        yield f"{name}/running_mean", s.running_mean
        yield f"{name}/running_var", s.running_var


def checkpoint_bytes(model: Model) -> bytes:
    arrays = list(_named_arrays(model))
    header = json.dumps(
        {"variant": model.variant.id, "config": model.config.to_dict(), "records": len(arrays)}, sort_keys=True
    ).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header]
    for name, arr in arrays:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(model))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (this build reads {VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
        variant = ModelVariant.parse(header["variant"])
        config = BackboneConfig(**header["config"])
        n_records = int(header["records"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid header: {exc}") from None

    records = {}
    for _ in range(n_records):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last record")

    model = build_model(variant, config, seed=0)
    expected = dict(_named_arrays(model))
    unknown = sorted(set(records) - set(expected))
    if unknown:
        raise CheckpointError(f"{path}: unknown parameter name(s) {unknown}")
    missing = sorted(set(expected) - set(records))
    if missing:
        raise CheckpointError(f"{path}: missing parameter(s) {missing}")
    for name, arr in records.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {expected[name].shape}")
    for name, arr in expected.items():
        arr[...] = records[name]
    return model
