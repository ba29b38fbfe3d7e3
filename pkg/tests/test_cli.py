import json
from pathlib import Path

import numpy as np
import pytest

from stflow.cli import main

TINY_TRAIN_CONFIG = {
    "train": {"batch_size": 4, "max_epochs": 2, "seed": 0, "patience": 5},
    "model": {"embed_dim": 16, "sin_dim": 16, "n_enc_layers": 1, "n_dec_layers": 1,
              "ff_dim": 16, "state_hidden": 16, "time_hidden": 16, "head_hidden": 32,
              "dropout": 0.0},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> train -> eval-intensity -> predict on a miniature run."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["simulate", "--process", "sthp", "--out", str(data),
                 "--n-train", "4", "--n-val", "2", "--n-test", "2", "--seed", "5"]) == 0
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_TRAIN_CONFIG))
    train_out = root / "train"
    assert main(["train", "--data", str(data), "--out", str(train_out),
                 "--config", str(cfg_path), "--quiet"]) == 0
    return root, data, train_out


class TestSimulate:
    def test_outputs_and_manifest(self, pipeline):
        _, data, _ = pipeline
        assert (data / "train.jsonl").exists()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["process"] == "sthp"
        assert (data / "run_manifest.json").exists()

    def test_replay_is_byte_identical(self, pipeline, tmp_path):
        _, data, _ = pipeline
        again = tmp_path / "again"
        assert main(["simulate", "--process", "sthp", "--out", str(again),
                     "--n-train", "4", "--n-val", "2", "--n-test", "2", "--seed", "5"]) == 0
        assert (again / "train.jsonl").read_bytes() == (data / "train.jsonl").read_bytes()
        assert (again / "test.jsonl").read_bytes() == (data / "test.jsonl").read_bytes()


class TestTrain:
    def test_checkpoint_written(self, pipeline):
        _, _, train_out = pipeline
        assert (train_out / "model.ckpt").exists()
        assert (train_out / "metrics.jsonl").exists()
        lines = (train_out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2


class TestEvalIntensity:
    def test_report_and_snapshots(self, pipeline):
        root, data, train_out = pipeline
        out = root / "intensity"
        rc = main(["eval-intensity", "--ckpt", str(train_out / "model.ckpt"),
                   "--data", str(data), "--out", str(out), "--grid", "3",
                   "--limit", "1", "--baseline-limit", "2",
                   "--solver", "euler", "--budget", "4", "--quiet"])
        assert rc == 0
        report = json.loads((out / "intensity_report.json").read_text())
        assert "model" in report and "constant_baseline" in report
        assert report["model"]["n_sequences"] == 1
        assert (out / "snapshots.npz").exists()

    def test_plot_renders_heatmaps(self, pipeline):
        root = pipeline[0]
        out = root / "figs"
        rc = main(["plot", "--snapshots", str(root / "intensity" / "snapshots.npz"),
                   "--out", str(out)])
        assert rc == 0
        assert list(out.glob("intensity_seq*.png"))


class TestTasks:
    def test_predict_hpp(self, pipeline):
        root, data, _ = pipeline
        out = root / "hpp"
        rc = main(["predict", "--data", str(data), "--out", str(out),
                   "--predictor", "hpp", "--seeds", "0", "1"])
        assert rc == 0
        files = sorted(out.glob("task_next_hpp_seed*.json"))
        assert len(files) == 2
        summary = json.loads((out / "summary_next_hpp.json").read_text())
        assert np.isfinite(summary["temporal_rmse_mean"])

    def test_predict_arch_and_determinism(self, pipeline):
        root, data, train_out = pipeline
        out1, out2 = root / "arch1", root / "arch2"
        for out in (out1, out2):
            rc = main(["predict", "--data", str(data), "--out", str(out),
                       "--ckpt", str(train_out / "model.ckpt"), "--steps", "4"])
            assert rc == 0
        s1 = json.loads((out1 / "summary_next_arch.json").read_text())
        s2 = json.loads((out2 / "summary_next_arch.json").read_text())
        assert s1 == s2

    def test_eval_named_task_knn(self, pipeline):
        root, data, _ = pipeline
        out = root / "knn"
        rc = main(["eval", "--task", "inverse-1", "--data", str(data),
                   "--out", str(out), "--predictor", "knn-3"])
        assert rc == 0
        assert (out / "summary_inverse-1_knn-3.json").exists()

    def test_impute_and_recover_and_forecast(self, pipeline):
        root, data, train_out = pipeline
        for cmd, extra in (("impute", ["--ratio", "0.3"]),
                           ("recover", ["--length", "2"]),
                           ("forecast", ["--horizon", "2", "--mode", "joint"]),
                           ("forecast", ["--horizon", "2", "--mode", "ar"])):
            out = root / f"task_{cmd}_{'_'.join(extra)}"
            rc = main([cmd, "--data", str(data), "--out", str(out),
                       "--ckpt", str(train_out / "model.ckpt"), "--steps", "3"] + extra)
            assert rc == 0


class TestReport:
    def test_aggregates_tables_and_figure(self, pipeline):
        root = pipeline[0]
        out = root / "report"
        rc = main(["report", "--dir", str(root), "--out", str(out)])
        assert rc == 0
        assert (out / "report.csv").exists()
        assert (out / "report.txt").exists()
        assert (out / "report.png").exists()
        header = (out / "report.csv").read_text().splitlines()[0]
        assert header.startswith("task,predictor,temporal_rmse")


class TestErrorCategories:
    def test_missing_required_argument_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["predict", "--out", "/tmp/x"])
        assert exc.value.code == 2

    def test_missing_data_dir_is_data_error(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"),
                   "--quiet"])
        assert rc == 3

    def test_bad_task_name_is_argument_error(self, pipeline, tmp_path):
        _, data, _ = pipeline
        rc = main(["eval", "--task", "wormhole-9", "--data", str(data),
                   "--out", str(tmp_path / "o"), "--predictor", "knn-3"])
        assert rc == 2
