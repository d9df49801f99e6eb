import csv
import json
import os

import numpy as np
import pytest

from stemvit.cli import (
    ConfigError,
    cmd_convergence,
    cmd_profile,
    cmd_sweep,
    cmd_verify,
    main,
    parse_config,
    plan_rows,
    svg_line_chart,
    write_sweep_table,
)
from stemvit.model import ModelConfig, Model, save_checkpoint

MICRO_MODEL = {
    "stem_spec": "1Conv+1BN+1ReLU+1Proj",
    "strides": [2, 4],
    "kernels": [3, 4],
    "image_size": 32,
    "patch_size": 8,
    "embed_dim": 16,
    "depth": 1,
    "heads": 2,
    "num_classes": 10,
    "mid_channels": 8,
}

MICRO_TRAIN = {
    "lr": 1e-3,
    "total_epochs": 1,
    "warmup_epochs": 0,
    "batch_size": 16,
    "dataset": "synth:0:64:10",
    "weight_decay": 0.01,
}


def write_config(tmp_path, extra=None, name="exp"):
    cfg = {"name": name, "model": MICRO_MODEL, "train": MICRO_TRAIN,
           "out": str(tmp_path / "runs")}
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestParseConfig:
    def test_minimal_valid(self, tmp_path):
        cfg = parse_config(write_config(tmp_path))
        assert cfg["name"] == "exp"
        assert len(plan_rows(cfg)) == 1

    def test_unknown_top_key(self, tmp_path):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(write_config(tmp_path, {"bogus": 1}))

    def test_unknown_sweep_axis(self, tmp_path):
        with pytest.raises(ConfigError, match="momentum"):
            parse_config(write_config(tmp_path, {"sweep": {"momentum": [0.9]}}))

    def test_unsafe_name(self, tmp_path):
        with pytest.raises(ConfigError, match="filesystem-safe"):
            parse_config(write_config(tmp_path, name="a/b"))

    def test_bad_stride_product_rejected_at_parse(self, tmp_path):
        path = write_config(tmp_path, {"sweep": {"stem": [
            {"spec": "1Proj", "strides": [4]}]}})  # patch size is 8
        with pytest.raises(Exception, match="stride"):
            parse_config(path)

    def test_grid_arithmetic(self, tmp_path):
        # 2 stems x 3 lrs x 2 optimizers x 3 warmups x 3 seeds = 108 rows
        path = write_config(tmp_path, {
            "sweep": {
                "stem": [{"spec": "1Proj", "strides": [8]},
                         {"spec": "1Proj+1ReLU", "strides": [8]}],
                "lr": [1e-3, 3e-3, 5e-3],
                "optimizer": ["adamw", "sam"],
                "warmup": [0, 1, 2],
            },
            "seeds": [0, 1, 2],
        })
        assert len(plan_rows(parse_config(path))) == 108

    def test_stem_entry_overrides(self, tmp_path):
        path = write_config(tmp_path, {
            "sweep": {"stem": [
                {"spec": "1Proj", "strides": [8], "lr": 9e-4, "warmup": 7}],
                "lr": [1e-3]},
        })
        rows = plan_rows(parse_config(path))
        assert rows[0]["lr"] == 9e-4
        assert rows[0]["warmup"] == 7

    def test_empty_seeds(self, tmp_path):
        with pytest.raises(ConfigError, match="seeds"):
            parse_config(write_config(tmp_path, {"seeds": []}))


class TestSweep:
    def test_grid_of_one(self, tmp_path):
        config = parse_config(write_config(tmp_path))
        results = cmd_sweep(config)
        assert len(results) == 1
        assert results[0]["error"] is None
        out = config["out"]
        assert os.path.exists(os.path.join(out, "summary.csv"))
        assert os.path.exists(os.path.join(out, "summary.json"))
        report_files = [f for f in os.listdir(out) if f.endswith(".json")
                        and f != "summary.json"]
        assert len(report_files) == 1

    def test_rerun_identical_table(self, tmp_path):
        config = parse_config(write_config(tmp_path))
        cmd_sweep(config)
        first = open(os.path.join(config["out"], "summary.csv")).read()
        cmd_sweep(config)
        second = open(os.path.join(config["out"], "summary.csv")).read()
        assert first == second

    def test_crash_rendered_literally(self, tmp_path):
        results = [{
            "row": {"stem": "1Proj", "strides": [8], "lr": 1.0, "optimizer": "adamw",
                    "warmup": 0, "ffn_variant": "baseline", "seed": 0},
            "diverged": True, "final_top1": None, "error": None, "checkpoints": {},
        }]
        path = tmp_path / "table.csv"
        write_sweep_table(results, path)
        rows = list(csv.reader(open(path)))
        assert rows[1][-1] == "crash"

    def test_row_error_recorded_not_raised(self, tmp_path):
        # unknown ffn variant fails inside the row, not the grid
        path = write_config(tmp_path, {"sweep": {"ffn_variant": ["baseline", "nonsense"]}})
        results = cmd_sweep(parse_config(path))
        errors = [r for r in results if r["error"]]
        assert len(errors) == 1
        assert "nonsense" in errors[0]["error"]


class TestVerify:
    def test_theorem1(self):
        report, ok = cmd_verify("theorem1", {"instances": 20, "penalty_instances": 50})
        assert ok
        assert report["rescaling_max_deviation"] < 1e-10
        assert report["frobenius_never_violated"]
        assert report["frobenius_equality_residual"] < 1e-9

    def test_theorem2(self):
        report, ok = cmd_verify("theorem2", {"trials": 100})
        assert ok
        assert report["violation_fraction"] <= 0.05
        assert report["cos_sim_bound_holds"]
        assert report["moments_ok"]

    def test_bounds_npy(self, tmp_path):
        rng = np.random.default_rng(0)
        B = rng.uniform(0.1, 1.0, (10, 20))
        path = str(tmp_path / "m.npy")
        np.save(path, B)
        report, ok = cmd_verify("bounds", {"matrix": path})
        assert ok and report["holds"]

    def test_bounds_csv(self, tmp_path):
        rng = np.random.default_rng(1)
        B = rng.uniform(0.1, 1.0, (5, 8))
        path = str(tmp_path / "m.csv")
        np.savetxt(path, B, delimiter=",")
        report, ok = cmd_verify("bounds", {"matrix": path})
        assert ok

    def test_unknown_verifier(self):
        with pytest.raises(ValueError, match="unknown verifier"):
            cmd_verify("theorem3", {})


class TestProfile:
    def _checkpoint(self, tmp_path, tag, spec="1Proj", strides=(8,), kernels=None):
        cfg = ModelConfig(**{**MICRO_MODEL, "stem_spec": spec,
                             "strides": strides, "kernels": kernels})
        model = Model(cfg, seed=0)
        path = str(tmp_path / f"{tag}.npz")
        save_checkpoint(path, model)
        return path

    def test_two_checkpoints_two_polylines(self, tmp_path):
        c1 = self._checkpoint(tmp_path, "a", "1Proj", (8,))
        c2 = self._checkpoint(tmp_path, "b", "1Proj+1ReLU", (8,))
        prefix = str(tmp_path / "profile")
        profiles = cmd_profile([c1, c2], "synth:0:64:10", prefix)
        assert len(profiles) == 2
        svg = open(prefix + ".svg").read()
        assert svg.count("<polyline") == 2
        assert "1Proj+1ReLU" in svg  # legend labels are the stem specs
        rows = list(csv.reader(open(prefix + ".csv")))
        # header + (depth + 2 trace entries) per checkpoint
        assert len(rows) == 1 + 2 * (MICRO_MODEL["depth"] + 2)

    def test_csv_values_in_range(self, tmp_path):
        c1 = self._checkpoint(tmp_path, "a")
        prefix = str(tmp_path / "p")
        cmd_profile([c1], "synth:0:64:10", prefix)
        for row in list(csv.reader(open(prefix + ".csv")))[1:]:
            assert -1.0 <= float(row[-1]) <= 1.0


class TestConvergence:
    def _report(self, tmp_path, tag, accs):
        payload = {"epochs": [{"epoch": e, "val_accuracy": a} for e, a in accs.items()],
                   "row": {"stem": tag}}
        path = tmp_path / f"{tag}.json"
        path.write_text(json.dumps(payload))
        return str(path)

    def test_common_epochs(self, tmp_path):
        r1 = self._report(tmp_path, "conv", {0: 0.2, 1: 0.5, 2: 0.8})
        r2 = self._report(tmp_path, "patch", {1: 0.3, 2: 0.4, 3: 0.6})
        text = cmd_convergence([r1, r2])
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,conv,patch"
        assert lines[1] == "1,0.5000,0.3000"
        assert len(lines) == 3  # epochs 1 and 2

    def test_single_report_rejected(self, tmp_path):
        r1 = self._report(tmp_path, "a", {0: 0.5})
        with pytest.raises(ValueError, match="at least 2"):
            cmd_convergence([r1])

    def test_disjoint_epochs(self, tmp_path):
        r1 = self._report(tmp_path, "a", {0: 0.5})
        r2 = self._report(tmp_path, "b", {5: 0.7})
        with pytest.raises(ValueError, match="no epoch"):
            cmd_convergence([r1, r2])


class TestSvg:
    def test_single_series(self, tmp_path):
        path = str(tmp_path / "chart.svg")
        svg_line_chart([("s", [0, 1, 2], [0.1, 0.5, 0.9])], path)
        svg = open(path).read()
        assert svg.startswith("<svg")
        assert svg.count("<polyline") == 1


class TestMain:
    def test_train_exit_codes_and_artifacts(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {
            "train": {**MICRO_TRAIN, "total_epochs": 5, "lr": 5e-3,
                      "dataset": "synth:0:480:10", "warmup_epochs": 1},
            "model": {**MICRO_MODEL, "embed_dim": 32, "mid_channels": 16},
        })
        out = str(tmp_path / "single")
        rc = main(["train", "--config", cfg, "--out", out])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "report.json"))
        assert os.path.exists(os.path.join(out, "checkpoint.npz"))

    def test_verify_exit_code(self, capsys):
        assert main(["verify", "theorem1", "--instances", "10"]) == 0

    def test_sweep_command(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rc = main(["sweep", "--config", cfg, "--jobs", "1"])
        assert rc == 0
