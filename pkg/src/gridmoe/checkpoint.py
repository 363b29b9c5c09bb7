"""Checkpoints: a flat binary of float64 values plus a JSON shape manifest.

The binary holds every parameter concatenated in manifest order (row-major);
no framework serialization is involved, so checkpoints stay portable and
diffable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeError


def manifest_path_for(bin_path) -> Path:
    bin_path = Path(bin_path)
    if bin_path.suffix == ".bin":
        return bin_path.with_suffix(".manifest.json")
    return bin_path.with_name(bin_path.name + ".manifest.json")


def save_checkpoint(bin_path, state: dict[str, np.ndarray]) -> tuple[Path, Path]:
    bin_path = Path(bin_path)
    entries = []
    chunks = []
    for name, array in state.items():
        arr = np.asarray(array, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ravel(arr, order="C"))
    flat = np.concatenate(chunks) if chunks else np.empty(0)
    bin_path.write_bytes(flat.tobytes())
    manifest = manifest_path_for(bin_path)
    manifest.write_text(
        json.dumps({"schema": "checkpoint.v1", "entries": entries}, indent=2) + "\n"
    )
    return bin_path, manifest


def load_checkpoint(bin_path) -> dict[str, np.ndarray]:
    bin_path = Path(bin_path)
    manifest = manifest_path_for(bin_path)
    if not bin_path.exists() or not manifest.exists():
        raise ShapeError(f"checkpoint files missing: {bin_path} / {manifest}")
    meta = json.loads(manifest.read_text())
    flat = np.frombuffer(bin_path.read_bytes(), dtype=np.float64)
    state: dict[str, np.ndarray] = {}
    offset = 0
    for entry in meta["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.size:
            raise ShapeError("checkpoint binary is shorter than its manifest declares")
        state[entry["name"]] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.size:
        raise ShapeError("checkpoint binary is longer than its manifest declares")
    return state
