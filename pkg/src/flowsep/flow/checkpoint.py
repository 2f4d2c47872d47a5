"""IGLW checkpoint container.

Layout (all little-endian)::

    b"IGLW" | u32 format version | u64 metadata length | UTF-8 JSON metadata | payloads

The metadata carries a ``tensors`` directory of ``{name, shape, offset,
nbytes}`` entries; offsets are relative to the first payload byte and every
payload is raw float32.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from flowsep.errors import FlowsepError

MAGIC = b"IGLW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(FlowsepError):
    pass


def write_container(path, metadata: dict, tensors: dict) -> None:
    """Write ``tensors`` (name -> array-like) in insertion order after the JSON header."""
    directory, blobs, offset = [], [], 0
    for name, value in tensors.items():
        if torch.is_tensor(value):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        blob = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(metadata)
    meta["tensors"] = directory
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path):
    """Return ``(metadata, {name: float32 ndarray})``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + meta_len
    try:
        meta = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from exc
    tensors = {}
    for entry in meta.get("tensors", []):
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return meta, tensors


def payload_digest(path) -> str:
    """SHA-256 of the tensor payload region only (independent of metadata)."""
    data = Path(path).read_bytes()
    _, _, meta_len = _HEADER.unpack_from(data)
    return hashlib.sha256(data[_HEADER.size + meta_len:]).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_model(path, model, extra_tensors: dict | None = None, extra_metadata: dict | None = None) -> None:
    """Serialise a :class:`GlowModel` (parameters and buffers, float32)."""
    meta = {
        "kind": "glow",
        "architecture": model.config.to_dict(),
        "metadata": model.metadata,
    }
    if extra_metadata:
        meta.update(extra_metadata)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    write_container(path, meta, tensors)


def load_model(path, dtype=torch.float32):
    """Return ``(model, metadata, extra_tensors)``."""
    from flowsep.flow.glow import GlowConfig, GlowModel

    meta, tensors = read_container(path)
    if meta.get("kind") != "glow":
        raise CheckpointError(f"{path}: not a glow checkpoint")
    model = GlowModel(GlowConfig.from_dict(meta["architecture"]), meta.get("metadata", {}))
    model.to(dtype)
    state = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("model."):
            state[name[len("model."):]] = torch.from_numpy(arr)
        else:
            extra[name] = arr
    own = model.state_dict()
    missing = set(own) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in state.items()})
    model.eval()
    return model, meta, extra
