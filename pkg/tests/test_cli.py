"""End-to-end CLI tests: exit codes, artifacts, determinism, flags."""

import json

import pytest

from gridmoe.cli import main
from gridmoe.csvio import read_csv
from gridmoe.runconfig import verify_manifest


@pytest.fixture(autouse=True)
def isolated_out_root(monkeypatch):
    monkeypatch.delenv("GRIDMOE_OUT", raising=False)


def write_config(path, **overrides):
    raw = {
        "moe": {"n_experts": 4, "top_k": 2, "gate_temperature": 0.5},
        "run": {"iterations": 12, "base_lr": 0.05, "seed": 0, "stats_samples": 4},
    }
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        raw.setdefault(section, {})[key] = value
    path.write_text(json.dumps(raw))
    return path


class TestTrainCommand:
    def test_successful_run_writes_artifacts_and_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        assert (out / "losses.csv").exists()
        assert (out / "dso_log.csv").exists()
        assert (out / "manifest.json").exists()
        assert verify_manifest(out)
        assert "final losses" in capsys.readouterr().out

    def test_missing_top_k_exits_2_naming_field(self, tmp_path, capsys):
        raw = {"moe": {"n_experts": 4}, "run": {"iterations": 2}}
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(raw))
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
        assert code == 2
        assert "moe.top_k" in capsys.readouterr().err

    def test_determinism_byte_identical_logs(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
        for name in ("losses.csv", "dso_log.csv"):
            a = (tmp_path / "r1" / name).read_bytes()
            b = (tmp_path / "r2" / name).read_bytes()
            assert a == b, name

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2"),
                     "--seed", "5"]) == 0
        assert ((tmp_path / "r1" / "losses.csv").read_bytes()
                != (tmp_path / "r2" / "losses.csv").read_bytes())

    def test_refuses_nonempty_out_without_force(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 2
        assert "--force" in capsys.readouterr().err
        assert main(["train", "--config", str(cfg), "--out", str(out), "--force"]) == 0

    def test_no_dso_no_moe_flags_recorded_and_applied(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--out", str(out),
                     "--no-dso", "--no-moe"])
        assert code == 0
        snapshot = json.loads((out / "config_snapshot.json").read_text())
        assert snapshot["run"]["dso"] is False
        assert snapshot["run"]["moe"] is False
        # governor forced to identity in the log
        for row in read_csv(out / "dso_log.csv"):
            assert float(row["gamma"]) == 1.0
        # no expert statistics without MoE blocks
        assert read_csv(out / "expert_stats.csv") == []

    def test_baseline_equals_library_plain_run(self, tmp_path):
        """--no-dso --no-moe is the simple-joint-training baseline."""
        from gridmoe.runconfig import parse_config
        from gridmoe.train import train

        cfg_path = write_config(tmp_path / "cfg.json")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out),
                     "--no-dso", "--no-moe"]) == 0
        raw = json.loads(cfg_path.read_text())
        raw["run"].update({"out_dir": str(tmp_path / "lib"), "dso": False, "moe": False})
        library = train(parse_config(raw))
        assert ((out / "losses.csv").read_bytes()
                == library.loss_csv().read_bytes())

    def test_env_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRIDMOE_OUT", str(tmp_path / "root"))
        cfg = write_config(tmp_path / "cfg.json", **{"run.out_dir": "nested/run"})
        assert main(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "root" / "nested" / "run" / "losses.csv").exists()


class TestSweepCommand:
    def test_expert_grid_three_runs(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", **{"run.iterations": 3,
                                                     "run.stats_samples": 0})
        out = tmp_path / "sweep"
        code = main(["sweep", "--config", str(cfg), "--grid", "moe.n_experts=2,4,8",
                     "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert len(rows) == 3
        assert {r["moe.n_experts"] for r in rows} == {"2", "4", "8"}

    def test_tau_row_with_fixed_bias(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", **{"run.iterations": 3,
                                                     "run.stats_samples": 0})
        out = tmp_path / "sweep"
        code = main(["sweep", "--config", str(cfg),
                     "--grid", "dso.tau=2,3,4 dso.bias_b=0.4", "--out", str(out)])
        assert code == 0
        rows = read_csv(out / "sweep.csv")
        assert len(rows) == 3
        assert all(0.0 < float(r["gamma_min"]) <= float(r["gamma_max"]) < 2.0
                   for r in rows)

    def test_empty_grid_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        code = main(["sweep", "--config", str(cfg), "--grid", "  ",
                     "--out", str(tmp_path / "s")])
        assert code == 2

    def test_malformed_grid_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        assert main(["sweep", "--config", str(cfg), "--grid", "tau",
                     "--out", str(tmp_path / "s")]) == 2

    def test_single_cell_matches_train_command(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", **{"run.iterations": 6,
                                                     "run.stats_samples": 0})
        sweep_out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(cfg), "--grid", "moe.top_k=2",
                     "--out", str(sweep_out)]) == 0
        train_out = tmp_path / "single"
        assert main(["train", "--config", str(cfg), "--out", str(train_out)]) == 0
        row = read_csv(sweep_out / "sweep.csv")[0]
        final = read_csv(train_out / "losses.csv")[-1]
        for t in ("A", "B", "C"):
            assert float(row[f"final_loss_{t}"]) == float(final[f"loss_{t}"])


class TestInspectCommand:
    def _trained_run(self, tmp_path, iterations=10):
        cfg = write_config(tmp_path / "cfg.json", **{"run.iterations": iterations})
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        return out

    def test_counts_sum_to_grid_positions(self, tmp_path, capsys):
        out = self._trained_run(tmp_path)
        n = 5
        code = main(["inspect-gates", "--checkpoint", str(out / "checkpoint.bin"),
                     "--modality", "B", "--n", str(n)])
        assert code == 0
        rows = read_csv(out / "inspect" / "participation.csv")
        per_layer = {}
        for row in rows:
            per_layer.setdefault(row["layer"], 0)
            per_layer[row["layer"]] += int(row["top1_count"])
        assert set(per_layer) == {"trunk.0", "trunk.2"}
        for layer, total in per_layer.items():
            assert total == n * 8 * 8, layer

    def test_n_zero_empty_stats(self, tmp_path):
        out = self._trained_run(tmp_path)
        code = main(["inspect-gates", "--checkpoint", str(out / "checkpoint.bin"),
                     "--modality", "A", "--n", "0"])
        assert code == 0
        assert read_csv(out / "inspect" / "participation.csv") == []

    def test_fresh_init_participation_mass_is_spread(self, tmp_path):
        """A freshly initialized checkpoint spreads routing mass over several
        experts per modality.

        The strict near-uniformity bound (within 0.1 of 1/N) holds over the
        isotropic input distribution the init is designed for and is pinned
        by the gate-level Monte-Carlo test; modality-conditioned features
        concentrate direction-wise, so here the honest claims are valid mass
        accounting and non-collapse.
        """
        cfg = write_config(tmp_path / "cfg.json", **{"run.iterations": 1,
                                                     "run.base_lr": 1e-12,
                                                     "moe.gate_temperature": 0.5})
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        code = main(["inspect-gates", "--checkpoint", str(out / "checkpoint.bin"),
                     "--modality", "C", "--n", "30"])
        assert code == 0
        rows = read_csv(out / "inspect" / "participation.csv")
        per_layer = {}
        for row in rows:
            share = float(row["participation_mass"]) / float(row["grid_positions"])
            per_layer.setdefault(row["layer"], []).append(share)
        assert set(per_layer) == {"trunk.0", "trunk.2"}
        for layer, shares in per_layer.items():
            # post-top-k mass per position is at most 1 and sums below 1
            assert 0.5 < sum(shares) <= 1.0 + 1e-9, layer
            assert sum(s > 0.05 for s in shares) >= 2, layer

    def test_checkpoint_config_mismatch_exits_2(self, tmp_path, capsys):
        out = self._trained_run(tmp_path)
        other_cfg = write_config(tmp_path / "other.json", **{"model.channels": 6})
        code = main(["inspect-gates", "--checkpoint", str(out / "checkpoint.bin"),
                     "--config", str(other_cfg), "--modality", "A", "--n", "1"])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err
