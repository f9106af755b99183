"""Checkpoint format: ``manifest.json`` + ``weights.bin``.

The blob is every parameter as little-endian float32, concatenated in
manifest order.  The manifest records the model config, each parameter's
name/shape/offset/byte length, and the SHA-256 of the blob, which is also
the model's content hash.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .model import MMDiT, ModelConfig, param_specs
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(RuntimeError):
    pass


def _blob(model: MMDiT) -> bytes:
    return b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in model.params.values())


def model_hash(model: MMDiT) -> str:
    return hashlib.sha256(_blob(model)).hexdigest()


def save_checkpoint(model: MMDiT, path) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = _blob(model)
    entries, offset = [], 0
    for name, t in model.params.items():
        nbytes = t.size * 4
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": entries,
        "blob": BLOB,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path) -> MMDiT:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {manifest.get('format_version')!r}")
    blob = (path / manifest["blob"]).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"blob length mismatch: expected {manifest['blob_bytes']} bytes, found {len(blob)}"
        )
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["sha256"]:
        raise CheckpointError(f"blob hash mismatch: expected {manifest['sha256']}, got {digest}")
    config = ModelConfig.from_dict(manifest["config"])
    specs = {name: shape for name, shape, _ in param_specs(config)}
    entries = manifest["params"]
    if [e["name"] for e in entries] != list(specs):
        raise CheckpointError("manifest parameter list does not match the model config")
    params = {}
    for e in entries:
        shape = tuple(e["shape"])
        if shape != specs[e["name"]]:
            raise CheckpointError(f"{e['name']}: manifest shape {shape} != config shape {specs[e['name']]}")
        if e["nbytes"] != int(np.prod(shape)) * 4:
            raise CheckpointError(f"{e['name']}: byte length {e['nbytes']} does not match shape {shape}")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(shape).astype(np.float32), name=e["name"])
    return MMDiT(config, params)


def checkpoint_hash(path) -> str:
    return read_manifest(path)["sha256"]
