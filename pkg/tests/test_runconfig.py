"""Config parsing, validation messages, and run manifests."""

import json

import pytest

from gridmoe.errors import ConfigError
from gridmoe.runconfig import (
    RunManifest,
    load_config_file,
    parse_config,
    resolve_out_dir,
    set_path,
    verify_manifest,
    write_config_snapshot,
)

MINIMAL = {
    "moe": {"n_experts": 4, "top_k": 2},
    "run": {"iterations": 10},
}


def minimal(**overrides):
    raw = json.loads(json.dumps(MINIMAL))
    for key, value in overrides.items():
        set_path(raw, key, value)
    return raw


class TestParsing:
    def test_defaults(self):
        cfg = parse_config(minimal())
        assert cfg.model.depth == 4
        assert cfg.model.channels == 8
        assert cfg.model.moe_layers == (0, 2)
        assert cfg.model.gate_temperature == 0.07
        assert cfg.dso.alpha == 0.05
        assert cfg.dso.tau == 3.0
        assert cfg.dso.bias_b == 0.4
        assert cfg.base_lr == 1e-4
        assert cfg.sampler.counts == (("A", 2), ("B", 1), ("C", 1))
        assert cfg.dso_enabled and cfg.moe_enabled

    def test_missing_top_k_names_field(self):
        raw = minimal()
        del raw["moe"]["top_k"]
        with pytest.raises(ConfigError) as excinfo:
            parse_config(raw)
        assert "moe.top_k" in str(excinfo.value)

    def test_missing_n_experts_names_field(self):
        raw = minimal()
        del raw["moe"]["n_experts"]
        with pytest.raises(ConfigError, match="moe.n_experts"):
            parse_config(raw)

    def test_missing_iterations_names_field(self):
        raw = minimal()
        del raw["run"]["iterations"]
        with pytest.raises(ConfigError, match="run.iterations"):
            parse_config(raw)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="moe.n_expert "):
            parse_config(minimal(**{"moe.n_expert ": 4}))

    def test_unknown_section_rejected(self):
        raw = minimal()
        raw["optimizer"] = {}
        with pytest.raises(ConfigError, match="optimizer"):
            parse_config(raw)

    def test_type_errors_name_fields(self):
        with pytest.raises(ConfigError, match="moe.top_k"):
            parse_config(minimal(**{"moe.top_k": "two"}))
        with pytest.raises(ConfigError, match="run.base_lr"):
            parse_config(minimal(**{"run.base_lr": "fast"}))

    def test_semantic_errors_propagate_field(self):
        with pytest.raises(ConfigError, match="moe.top_k"):
            parse_config(minimal(**{"moe.top_k": 9}))
        with pytest.raises(ConfigError, match="run.base_lr"):
            parse_config(minimal(**{"run.base_lr": -1.0}))
        with pytest.raises(ConfigError, match="model.moe_layers"):
            parse_config(minimal(**{"model.moe_layers": [7]}))
        with pytest.raises(ConfigError, match="sampler.counts"):
            parse_config(minimal(**{"sampler.counts": {"A": 2, "D": 1}}))

    def test_snapshot_roundtrips(self):
        cfg = parse_config(minimal())
        again = parse_config(cfg.snapshot())
        assert again == cfg

    def test_config_file_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config_file(bad)


class TestOutDirResolution:
    def test_relative_uses_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDMOE_OUT", str(tmp_path / "root"))
        assert resolve_out_dir("runs/x") == tmp_path / "root" / "runs" / "x"

    def test_absolute_ignores_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDMOE_OUT", str(tmp_path / "root"))
        absolute = tmp_path / "elsewhere"
        assert resolve_out_dir(str(absolute)) == absolute

    def test_no_env_keeps_relative(self, monkeypatch):
        monkeypatch.delenv("GRIDMOE_OUT", raising=False)
        assert str(resolve_out_dir("runs/x")) == "runs/x"


class TestManifest:
    def test_hash_verifies_and_detects_tamper(self, tmp_path):
        cfg = parse_config(minimal(**{"run.out_dir": str(tmp_path)}))
        manifest = RunManifest.start(tmp_path, cfg, "orig.json")
        manifest.finish(tmp_path, {"losses": "losses.csv"}, 0)
        assert verify_manifest(tmp_path)

        snapshot = tmp_path / "config_snapshot.json"
        data = json.loads(snapshot.read_text())
        data["run"]["seed"] = 999
        snapshot.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        assert not verify_manifest(tmp_path)

    def test_manifest_records_run_metadata(self, tmp_path):
        cfg = parse_config(minimal(**{"run.out_dir": str(tmp_path), "run.seed": 7}))
        manifest = RunManifest.start(tmp_path, cfg, "cfg.json")
        path = manifest.finish(tmp_path, {"a": "b"}, 0)
        recorded = json.loads(path.read_text())
        assert recorded["seed"] == 7
        assert recorded["exit_status"] == 0
        assert recorded["artifacts"] == {"a": "b"}
        assert recorded["started_at"] <= recorded["finished_at"]

    def test_snapshot_is_canonical(self, tmp_path):
        cfg = parse_config(minimal())
        p1 = write_config_snapshot(tmp_path, cfg)
        text1 = p1.read_text()
        p2 = write_config_snapshot(tmp_path, cfg)
        assert p2.read_text() == text1
