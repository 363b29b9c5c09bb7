"""Flat-binary checkpoint format tests."""

import json

import numpy as np
import pytest

from gridmoe.checkpoint import load_checkpoint, manifest_path_for, save_checkpoint
from gridmoe.errors import ShapeError


def test_roundtrip_preserves_bits(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "trunk.0.base.weight": rng.normal(size=(4, 4)),
        "trunk.0.base.bias": rng.normal(size=4),
        "head.A.weight": rng.normal(size=(3, 4)),
        "scalar": np.array(3.25),
    }
    bin_path, manifest = save_checkpoint(tmp_path / "checkpoint.bin", state)
    assert manifest.name == "checkpoint.manifest.json"
    loaded = load_checkpoint(bin_path)
    assert list(loaded) == list(state)
    for name in state:
        assert loaded[name].tobytes() == np.ascontiguousarray(state[name]).tobytes()
        assert loaded[name].shape == state[name].shape


def test_manifest_records_shapes(tmp_path):
    state = {"a": np.zeros((2, 3)), "b": np.ones(5)}
    _, manifest = save_checkpoint(tmp_path / "checkpoint.bin", state)
    meta = json.loads(manifest.read_text())
    assert meta["schema"] == "checkpoint.v1"
    assert meta["entries"] == [
        {"name": "a", "shape": [2, 3]},
        {"name": "b", "shape": [5]},
    ]


def test_truncated_binary_rejected(tmp_path):
    state = {"a": np.zeros((2, 3))}
    bin_path, _ = save_checkpoint(tmp_path / "checkpoint.bin", state)
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(ShapeError):
        load_checkpoint(bin_path)


def test_oversized_binary_rejected(tmp_path):
    state = {"a": np.zeros((2, 3))}
    bin_path, _ = save_checkpoint(tmp_path / "checkpoint.bin", state)
    bin_path.write_bytes(bin_path.read_bytes() + b"\x00" * 8)
    with pytest.raises(ShapeError):
        load_checkpoint(bin_path)


def test_missing_files_rejected(tmp_path):
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "nope.bin")


def test_manifest_path_for_non_bin_suffix(tmp_path):
    assert manifest_path_for("model.ckpt").name == "model.ckpt.manifest.json"
