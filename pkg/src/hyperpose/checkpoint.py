"""Versioned checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"HYPOSE\\x00\\x01"
    8       4     format version (u32)
    12      8     manifest length M in bytes (u64)
    20      M     manifest, UTF-8 JSON with sorted keys
    20+M    ...   tensor blobs, float32 little-endian, C order, back to back

The manifest holds ``config`` (the run config as nested sections), ``meta``
(free-form run metadata) and ``tensors``: a list of ``{name, shape, offset,
nbytes}`` with offsets relative to the start of the blob area.  Tensors are
listed in the model's parameter order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import Config, ConfigError, ModelConfig, config_from_dict
from .model import HyperPoseModel

MAGIC = b"HYPOSE\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class CheckpointVersionError(CheckpointError):
    def __init__(self, path, found: int):
        self.found = found
        super().__init__(path, f"format version {found} is not supported (expected {VERSION})")


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Stored tensors disagree with the model the config describes."""

    def __init__(self, path, name: str, stored, expected):
        self.name, self.stored, self.expected = name, stored, expected
        super().__init__(path, f"tensor '{name}' has shape {stored} but the config implies {expected}")


@dataclass
class Checkpoint:
    model: HyperPoseModel
    config: Config
    meta: dict[str, Any]


def _config_dict(model: HyperPoseModel, config: Config | None) -> dict[str, Any]:
    if config is None:
        config = Config(model=model.config)
    elif config.model != model.config:
        raise ConfigError("model", "checkpoint config does not describe the model being saved")
    return config.to_dict()


def encode_checkpoint(model: HyperPoseModel, config: Config | None = None, meta: dict | None = None) -> bytes:
    table, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        blob = np.ascontiguousarray(p.data, dtype=_BLOB_DTYPE).tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"config": _config_dict(model, config), "meta": meta or {}, "tensors": table}
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def save_checkpoint(model: HyperPoseModel, path: str | Path, config: Config | None = None,
                    meta: dict | None = None) -> Path:
    """Write ``model`` to ``path`` atomically (temp file + rename)."""
    path = Path(path)
    data = encode_checkpoint(model, config, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def read_manifest(path: str | Path) -> tuple[dict[str, Any], bytes]:
    """Parse the header and manifest; returns the manifest and the blob area."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedCheckpointError(path, f"file is {len(raw)} bytes, shorter than the header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(path, "not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(path, version)
    end = _HEADER.size + mlen
    if len(raw) < end:
        raise TruncatedCheckpointError(path, "manifest is cut short")
    try:
        manifest = json.loads(raw[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(path, f"manifest is not valid JSON: {exc}") from None
    blobs = raw[end:]
    need = sum(t["nbytes"] for t in manifest["tensors"])
    if len(blobs) < need:
        raise TruncatedCheckpointError(path, f"tensor data has {len(blobs)} of {need} bytes")
    return manifest, blobs


def read_checkpoint(path: str | Path, config: Config | ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint.

    With ``config`` given, the model is built from it instead of the stored
    config and every stored tensor must match the resulting shapes.
    """
    manifest, blobs = read_manifest(path)
    stored = config_from_dict(manifest["config"])
    if config is None:
        config = stored
    elif isinstance(config, ModelConfig):
        config = Config(model=config, train=stored.train, data=stored.data)
    model = HyperPoseModel(config.model, rng=0)
    params = dict(model.named_parameters())
    names = [t["name"] for t in manifest["tensors"]]
    for t in manifest["tensors"]:
        p = params.get(t["name"])
        if p is None:
            raise CheckpointMismatchError(path, t["name"], tuple(t["shape"]), None)
        if tuple(t["shape"]) != p.shape:
            raise CheckpointMismatchError(path, t["name"], tuple(t["shape"]), p.shape)
        arr = np.frombuffer(blobs, dtype=_BLOB_DTYPE, count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"])
        p.data = arr.reshape(t["shape"]).astype(p.dtype, copy=True)
    missing = sorted(set(params) - set(names))
    if missing:
        raise CheckpointMismatchError(path, missing[0], None, params[missing[0]].shape)
    return Checkpoint(model=model, config=config, meta=manifest.get("meta", {}))


def load_checkpoint(path: str | Path, config: Config | ModelConfig | None = None) -> HyperPoseModel:
    return read_checkpoint(path, config).model
