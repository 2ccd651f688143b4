"""End-to-end tests of the command-line surface on small streams."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from anomstream.cli import main

SMALL_RUN_CONFIG = {
    "engine": {
        "update_interval": 400,
        "abnormal_warmup": 50,
        "buffer_capacity": 1000,
        "seed": 3,
    },
    "scorer": {
        "timestep": 3,
        "hidden_size": 6,
        "latent_size": 3,
        "epochs_initial": 6,
        "epochs_update": 2,
        "batch_size": 16,
    },
    "forest": {"n_estimators": 8, "max_depth": 6},
    "stream": {
        "source": "synthetic",
        "split": {"kind": "fractions", "first": 0.05, "train": 0.65, "test": 0.30},
        "synthetic": {
            "n_records": 4000,
            "n_features": 5,
            "anomaly_rate": 0.03,
            "anomaly_burst": 12,
            "anomaly_shift": 3.0,
            "drift_magnitude": 1.0,
        },
    },
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "config.json"
    cfg.write_text(json.dumps(SMALL_RUN_CONFIG))
    out = base / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--mode", "adaptive"]) == 0
    return out


class TestRun:
    def test_artifacts_exist(self, run_dir):
        for name in ("verdicts.csv", "thresholds.csv", "metrics.txt", "metrics.csv",
                     "scorer.npz", "run_config.json"):
            assert (run_dir / name).exists(), name

    def test_verdict_columns(self, run_dir):
        rows = list(csv.DictReader(open(run_dir / "verdicts.csv")))
        assert list(rows[0]) == ["index", "loss", "route", "label", "t1", "t2", "score"]
        n_total = SMALL_RUN_CONFIG["stream"]["synthetic"]["n_records"]
        n_first = int(round(0.05 * n_total))
        assert len(rows) == n_total - n_first
        for row in rows[:50]:
            assert row["label"] in ("normal", "abnormal")
            assert row["route"] in ("high_conf_normal", "high_conf_abnormal", "classifier")
            assert 0.0 <= float(row["score"]) <= 1.0

    def test_threshold_trajectory(self, run_dir):
        rows = list(csv.DictReader(open(run_dir / "thresholds.csv")))
        events = [r["event"] for r in rows]
        assert events[0] == "bootstrap"
        assert "retrain" in events
        retrains = [r for r in rows if r["event"] == "retrain"]
        assert len(retrains) >= 5
        for row in retrains:
            assert float(row["t1"]) > 0

    def test_metrics_files_agree(self, run_dir):
        text = dict(
            line.split("=") for line in (run_dir / "metrics.txt").read_text().strip().splitlines()
        )
        header, row = (run_dir / "metrics.csv").read_text().strip().splitlines()
        by_col = dict(zip(header.split(","), row.split(",")))
        assert by_col == text

    def test_same_seed_byte_identical(self, run_dir, tmp_path):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(SMALL_RUN_CONFIG))
        out2 = tmp_path / "rerun"
        assert main(["run", "--config", str(cfg), "--out", str(out2), "--mode", "adaptive"]) == 0
        for name in ("verdicts.csv", "thresholds.csv", "metrics.txt", "metrics.csv"):
            assert (out2 / name).read_bytes() == (run_dir / name).read_bytes(), name

    def test_scorer_only_has_no_forest_checkpoint(self, run_dir, tmp_path):
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(SMALL_RUN_CONFIG))
        out = tmp_path / "scorer_only"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--mode", "scorer-only"]) == 0
        assert not (out / "forest.json").exists()
        assert (out / "scorer.npz").exists()

    def test_unknown_mode_is_usage_error(self, tmp_path):
        assert main(["run", "--out", str(tmp_path / "x"), "--mode", "bogus"]) == 1

    def test_missing_csv_is_data_error(self, tmp_path):
        rc = main([
            "run", "--out", str(tmp_path / "x"), "--csv", str(tmp_path / "nope.csv"),
            "--schema", str(tmp_path / "nope.json"),
        ])
        assert rc == 2


class TestEval:
    def test_eval_matches_run_metrics(self, run_dir, tmp_path):
        # rebuild the truth for the test slice from the generator
        from anomstream.ingest import SyntheticConfig, synthetic_stream

        synth = SMALL_RUN_CONFIG["stream"]["synthetic"]
        records = synthetic_stream(SyntheticConfig(**synth), seed=3)
        n = synth["n_records"]
        test_start = int(round(0.05 * n)) + int(round(0.65 * n))
        truth_path = tmp_path / "truth.csv"
        with truth_path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "label"])
            for r in records[test_start:]:
                writer.writerow([r.index, r.truth.display])
        assert main(["eval", "--verdicts", str(run_dir / "verdicts.csv"),
                     "--truth", str(truth_path)]) == 0

    def test_eval_perfect_fixture(self, tmp_path, capsys):
        verdicts = tmp_path / "verdicts.csv"
        truth = tmp_path / "truth.csv"
        with verdicts.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "loss", "route", "label", "t1", "t2", "score"])
            for i in range(8):
                label = "abnormal" if i < 2 else "normal"
                score = 0.9 if i < 2 else 0.1
                writer.writerow([i, score, "high_conf_abnormal" if i < 2 else "high_conf_normal",
                                 label, 0.5, 0.7, score])
        with truth.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "label"])
            for i in range(8):
                writer.writerow([i, "abnormal" if i < 2 else "normal"])
        assert main(["eval", "--verdicts", str(verdicts), "--truth", str(truth)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        values = dict(zip(out[0].split(","), out[1].split(",")))
        assert values["far"] == "0.00"
        assert values["mdr"] == "0.00"
        assert values["spauc"] == "100.00"

    def test_eval_all_normal_log(self, tmp_path, capsys):
        verdicts = tmp_path / "verdicts.csv"
        truth = tmp_path / "truth.csv"
        with verdicts.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "loss", "route", "label", "t1", "t2", "score"])
            for i in range(6):
                writer.writerow([i, 0.1 * i, "high_conf_normal", "normal", 0.9, "", 0.1 * i])
        with truth.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "label"])
            for i in range(6):
                writer.writerow([i, "abnormal" if i >= 3 else "normal"])
        assert main(["eval", "--verdicts", str(verdicts), "--truth", str(truth)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        values = dict(zip(out[0].split(","), out[1].split(",")))
        assert values["mdr"] == "100.00"

    def test_eval_hand_built_confusion(self, tmp_path, capsys):
        # tp=3 fp=1 tn=4 fn=2: acc 70%, FAR 1/5, MDR 2/5 worked out by hand
        rows = [
            ("abnormal", "abnormal"), ("abnormal", "abnormal"), ("abnormal", "abnormal"),
            ("abnormal", "normal"),
            ("normal", "normal"), ("normal", "normal"), ("normal", "normal"), ("normal", "normal"),
            ("normal", "abnormal"), ("normal", "abnormal"),
        ]
        verdicts = tmp_path / "verdicts.csv"
        truth = tmp_path / "truth.csv"
        with verdicts.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "loss", "route", "label", "t1", "t2", "score"])
            for i, (pred, _) in enumerate(rows):
                writer.writerow([i, 1.0, "high_conf_normal", pred, 2.0, 3.0, 0.5])
        with truth.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "label"])
            for i, (_, t) in enumerate(rows):
                writer.writerow([i, t])
        assert main(["eval", "--verdicts", str(verdicts), "--truth", str(truth)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        values = dict(zip(out[0].split(","), out[1].split(",")))
        assert values["accuracy"] == "70.00"
        assert values["far"] == "20.00"
        assert values["mdr"] == "40.00"

    def test_misaligned_truth_is_data_error(self, tmp_path):
        verdicts = tmp_path / "verdicts.csv"
        truth = tmp_path / "truth.csv"
        verdicts.write_text("index,loss,route,label,t1,t2,score\n0,1.0,classifier,normal,1,2,0.5\n")
        truth.write_text("index,label\n5,normal\n")
        assert main(["eval", "--verdicts", str(verdicts), "--truth", str(truth)]) == 2


class TestFit:
    def test_lognormal_column(self, tmp_path, capsys):
        rng = np.random.default_rng(10)
        path = tmp_path / "losses.csv"
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["loss"])
            for v in rng.lognormal(0.3, 0.6, size=3000):
                writer.writerow([repr(float(v))])
        pp = tmp_path / "pp.csv"
        assert main(["fit", "--csv", str(path), "--column", "loss",
                     "--percentile", "0.98", "--pp-out", str(pp)]) == 0
        out = capsys.readouterr().out
        assert "family=lognormal" in out
        rows = list(csv.DictReader(open(pp)))
        assert list(rows[0]) == ["empirical", "theoretical"]
        assert len(rows) == 3000

    def test_bad_percentile_is_usage_error(self, tmp_path):
        path = tmp_path / "losses.csv"
        path.write_text("loss\n1.0\n2.0\n")
        assert main(["fit", "--csv", str(path), "--column", "loss",
                     "--percentile", "1.5"]) == 1

    def test_empty_column_is_data_error(self, tmp_path):
        path = tmp_path / "losses.csv"
        path.write_text("loss\n\n\n")
        assert main(["fit", "--csv", str(path), "--column", "loss",
                     "--percentile", "0.9"]) == 2

    def test_missing_column_is_data_error(self, tmp_path):
        path = tmp_path / "losses.csv"
        path.write_text("other\n1.0\n")
        assert main(["fit", "--csv", str(path), "--column", "loss",
                     "--percentile", "0.9"]) == 2


class TestSynth:
    def test_writes_csv_and_schema(self, tmp_path):
        out = tmp_path / "stream.csv"
        schema = tmp_path / "schema.json"
        assert main(["synth", "--out", str(out), "--n", "500", "--features", "4",
                     "--rate", "0.1", "--seed", "2", "--schema-out", str(schema)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 500
        assert list(rows[0]) == ["f0", "f1", "f2", "f3", "label"]
        assert set(r["label"] for r in rows) == {"normal", "abnormal"}
        doc = json.loads(schema.read_text())
        assert doc["features"] == ["f0", "f1", "f2", "f3"]

    def test_synth_then_run_csv_source(self, tmp_path):
        stream = tmp_path / "stream.csv"
        schema = tmp_path / "schema.json"
        main(["synth", "--out", str(stream), "--n", "2500", "--features", "4",
              "--rate", "0.05", "--seed", "4", "--schema-out", str(schema)])
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps({
            "engine": {"update_interval": 300, "abnormal_warmup": 40, "seed": 5},
            "scorer": {"timestep": 3, "hidden_size": 6, "latent_size": 3,
                       "epochs_initial": 4, "epochs_update": 1},
            "forest": {"n_estimators": 6, "max_depth": 5},
            "stream": {"split": {"kind": "fractions", "first": 0.05,
                                 "train": 0.65, "test": 0.30}},
        }))
        out = tmp_path / "run"
        rc = main(["run", "--config", str(cfg), "--out", str(out),
                   "--csv", str(stream), "--schema", str(schema)])
        assert rc == 0
        assert (out / "verdicts.csv").exists()
        assert (out / "metrics.txt").exists()


class TestModuleEntryPoint:
    def test_python_dash_m_usage(self):
        proc = subprocess.run(
            [sys.executable, "-m", "anomstream", "fit", "--csv", "missing.csv",
             "--column", "loss", "--percentile", "0.9"],
            capture_output=True, text=True, timeout=120,
        )
        assert proc.returncode == 2
        assert "data error" in proc.stderr
