"""Binary checkpoint format.

Layout (little-endian)::

    b"FREE" | uint32 version | uint64 metadata length | metadata JSON (UTF-8)
    | float32 tensors, concatenated in the order listed in metadata["tensors"]
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from .encode import Vocabulary
from .train import FreeModel, ModelConfig

MAGIC = b"FREE"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def to_bytes(model: FreeModel) -> bytes:
    tensors = model.tensors()
    meta = {
        "model_config": asdict(model.config),
        "vocab": model.vocab.tokens,
        "target_shift": model.target_shift,
        "target_scale": model.target_scale,
        "provenance": model.provenance,
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> FreeModel:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"truncated file: {len(data)} bytes is shorter than the header")
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} (expected {MAGIC!r})")
    if version not in SUPPORTED_VERSIONS:
        supported = ", ".join(map(str, SUPPORTED_VERSIONS))
        raise CheckpointError(f"unsupported version {version} (supported: {supported})")
    off = _HEADER.size
    if len(data) < off + meta_len:
        raise CheckpointError("truncated file: metadata incomplete")
    try:
        meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from exc
    off += meta_len
    encoder, lstm = {}, {}
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = off + 4 * n
        if end > len(data):
            raise CheckpointError(f"truncated file: tensor {name} incomplete")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off = end
        group, leaf = name.split(".", 1)
        (encoder if group == "encoder" else lstm)[leaf] = arr
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after tensors")
    return FreeModel(
        ModelConfig(**meta["model_config"]),
        Vocabulary(meta["vocab"]),
        encoder,
        lstm,
        meta["target_shift"],
        meta["target_scale"],
        meta["provenance"],
    )


def save_checkpoint(model: FreeModel, path: Union[str, Path]) -> str:
    """Write the checkpoint; returns its SHA-256."""
    data = to_bytes(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> FreeModel:
    return from_bytes(Path(path).read_bytes())


def checkpoint_hash(model: FreeModel) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()
