import configparser
import csv
import json

import numpy as np
import pytest

from kanboost import cli
from kanboost.data import CLASS_NAMES
from kanboost.pipeline import EvalReport, read_confusion_csv

from conftest import GOLDEN_DIR

TINY = {
    "synth": {"counts": "300, 30, 30, 30, 30, 30, 30, 30, 30, 30, 30"},
    "train": {"epochs": "3", "batch_size": "64", "learning_rate": "0.01"},
    "gbt": {"n_estimators": "4", "max_depth": "3"},
}


def write_config(path, base=TINY, **overrides):
    """INI file holding ``base`` with per-section ``overrides`` merged in."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(base)
    cfg.read_dict(overrides)
    with open(path, "w") as fh:
        cfg.write(fh)
    return path


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = write_config(root / "tiny.ini")
    assert cli.main(["prepare", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return {"root": root, "config": cfg, "data": root / "data"}


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_profiles_load(self):
        for name in cli.PROFILES:
            settings = cli.model_settings(cli.load_config(name))
            assert settings.widths == (115, 10, 11)
            assert settings.train.epochs == 50 and settings.train.batch_size == 512
            assert settings.train.step_size == 10 and settings.train.gamma == 0.5
            assert settings.gbt.n_estimators == 100 and settings.gbt.max_depth == 6

    def test_paper_sampling_plan(self):
        plan = cli.sampling_plan(cli.load_config("paper"))
        assert plan.total == 500_000
        assert len(plan.devices) == 7 and len(plan.attacks) == 10

    def test_seed_override(self):
        cfg = cli.load_config("synth-small", seed=42)
        assert {cfg[s][k] for s, k in cli.SEED_KEYS} == {"42"}

    def test_override_file(self, tmp_path):
        path = tmp_path / "o.ini"
        path.write_text("[gbt]\nmax_depth = none\n")
        assert cli.model_settings(cli.load_config("paper", path)).gbt.max_depth is None


class TestSynthAndPrepare:
    def test_synth_writes_csvs_and_manifest(self, tmp_path, tiny):
        assert run("synth", "--config", tiny["config"], "--out", tmp_path) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["rows"] == 600
        assert manifest["class_counts"]["benign"] == 300
        assert all(manifest["class_counts"][name] == 30 for name in CLASS_NAMES[1:])
        assert len(list(tmp_path.glob("*.csv"))) == len(manifest["files"])
        assert (tmp_path / "config.ini").is_file()

    def test_prepare_manifest(self, tiny):
        manifest = json.loads((tiny["data"] / "manifest.json").read_text())
        assert manifest["rows"] == 600
        assert (manifest["benign_rows"], manifest["malicious_rows"]) == (300, 300)
        assert (manifest["train_rows"], manifest["test_rows"]) == (480, 120)
        assert sum(manifest["device_counts"].values()) == 600
        train_ids = np.loadtxt(tiny["data"] / "train" / "provenance.csv", delimiter=",", skiprows=1, usecols=0)
        test_ids = np.loadtxt(tiny["data"] / "test" / "provenance.csv", delimiter=",", skiprows=1, usecols=0)
        assert set(train_ids).isdisjoint(test_ids)

    def test_prepare_deterministic(self, tmp_path, tiny):
        assert run("prepare", "--config", tiny["config"], "--out", tmp_path) == 0
        assert (tmp_path / "manifest.json").read_bytes() == (tiny["data"] / "manifest.json").read_bytes()

    def test_seed_changes_output(self, tmp_path, tiny):
        assert run("prepare", "--config", tiny["config"], "--seed", 1, "--out", tmp_path) == 0
        assert (tmp_path / "manifest.json").read_bytes() != (tiny["data"] / "manifest.json").read_bytes()

    def test_prepare_from_csv_files(self, tmp_path):
        synth = write_config(tmp_path / "synth.ini", synth={"counts": "300" + ", 70" * 10})
        assert run("synth", "--config", synth, "--out", tmp_path / "csv") == 0
        devices = ", ".join(f"synth-{i}" for i in range(7))
        cfg = write_config(tmp_path / "csv.ini", {},
                           data={"source": "nbaiot", "source_dir": str(tmp_path / "csv")},
                           sampling={"benign_total": "200", "per_attack_per_device": "2", "devices": devices})
        assert run("prepare", "--profile", "paper", "--config", cfg, "--out", tmp_path / "out") == 0
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert (manifest["benign_rows"], manifest["malicious_rows"]) == (200, 140)
        assert len(manifest["sources"]) == 77

    def test_insufficient_source_rows(self, tmp_path, tiny, capsys):
        assert run("synth", "--config", tiny["config"], "--out", tmp_path / "csv") == 0
        cfg = write_config(tmp_path / "csv.ini", {},
                           data={"source": "nbaiot", "source_dir": str(tmp_path / "csv")},
                           sampling={"benign_total": "10", "per_attack_per_device": "50", "devices": "synth-0"})
        assert run("prepare", "--profile", "paper", "--config", cfg, "--out", tmp_path / "out") == cli.EXIT_DATA
        assert "insufficient samples for (synth-0," in capsys.readouterr().err


class TestTrainEval:
    @pytest.mark.parametrize("kind,files", [
        ("kan", {"kan.bin", "standardizer.json", "loss_trace.csv", "config.ini"}),
        ("mlp", {"mlp.bin", "standardizer.json", "loss_trace.csv", "config.ini"}),
        ("hybrid", {"kan.bin", "gbt.bin", "standardizer.json", "loss_trace.csv", "gbt_loss_trace.csv", "config.ini"}),
    ])
    def test_train_artifacts(self, tmp_path, tiny, kind, files):
        assert run("train", "--config", tiny["config"], "--data", tiny["data"], "--model", kind, "--out", tmp_path) == 0
        assert {p.name for p in tmp_path.iterdir()} == files
        assert len(read_rows(tmp_path / "loss_trace.csv")) == 1 + 3
        if kind == "hybrid":
            assert len(read_rows(tmp_path / "gbt_loss_trace.csv")) == 1 + 4

    def test_train_deterministic(self, tmp_path, tiny):
        for name in ("a", "b"):
            assert run("train", "--config", tiny["config"], "--data", tiny["data"], "--model", "hybrid",
                       "--out", tmp_path / name) == 0
        for f in ("kan.bin", "gbt.bin", "loss_trace.csv", "gbt_loss_trace.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_eval_outputs(self, tmp_path, tiny, capsys):
        model = tmp_path / "model"
        assert run("train", "--config", tiny["config"], "--data", tiny["data"], "--model", "kan", "--out", model) == 0
        capsys.readouterr()
        assert run("eval", "--config", tiny["config"], "--data", tiny["data"], "--model-dir", model,
                   "--out", tmp_path / "ev") == 0
        assert capsys.readouterr().out.startswith("kan [test] accuracy")
        rows = read_rows(tmp_path / "ev" / "confusion_test.csv")
        assert len(rows) == 12 and all(len(r) == 12 for r in rows)
        assert rows[0][1:] == list(CLASS_NAMES)
        report = json.loads((tmp_path / "ev" / "report_test.json").read_text())
        assert report["n_samples"] == 120

    def test_eval_width_mismatch(self, tmp_path, tiny):
        cfg = write_config(tmp_path / "narrow.ini", synth={"width": "20"}, model={"widths": "20, 10, 11"})
        assert run("prepare", "--config", cfg, "--out", tmp_path / "narrow") == 0
        assert run("train", "--config", cfg, "--data", tmp_path / "narrow", "--model", "kan",
                   "--out", tmp_path / "m") == 0
        assert run("eval", "--data", tiny["data"], "--model-dir", tmp_path / "m", "--out", tmp_path / "e") == cli.EXIT_CONFIG


class TestCompare:
    def test_rows_and_traces(self, tmp_path, tiny):
        assert run("compare", "--config", tiny["config"], "--data", tiny["data"], "--out", tmp_path) == 0
        rows = read_rows(tmp_path / "comparison.csv")
        assert [r[0] for r in rows[1:]] == ["mlp", "kan", "hybrid"]
        for name, n in (("mlp", 3), ("kan", 3), ("hybrid_gbt", 4)):
            assert len(read_rows(tmp_path / f"loss_{name}.csv")) == 1 + n

    def test_compare_deterministic(self, tmp_path, tiny):
        for name in ("a", "b"):
            assert run("compare", "--config", tiny["config"], "--data", tiny["data"], "--out", tmp_path / name) == 0
        for f in ("comparison.csv", "loss_mlp.csv", "loss_kan.csv", "loss_hybrid_gbt.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_failed_model_is_flushed(self, tmp_path, tiny):
        cfg = write_config(tmp_path / "bad.ini", train={"learning_rate": "1e300"})
        assert run("compare", "--config", cfg, "--data", tiny["data"], "--out", tmp_path / "c") == cli.EXIT_NUMERIC
        rows = {r[0]: r for r in read_rows(tmp_path / "c" / "comparison.csv")[1:]}
        assert rows["mlp"][1] == "failed"


@pytest.mark.slow
class TestGoldenRun:
    def test_matches_committed_file(self, golden_run):
        produced = (golden_run["compare"] / "comparison.csv").read_bytes()
        assert produced == (GOLDEN_DIR / "compare_synth_small.csv").read_bytes()

    def test_hybrid_dominates_kan(self, golden_run):
        rows = {r[0]: r for r in read_rows(golden_run["compare"] / "comparison.csv")[1:]}
        assert float(rows["hybrid"][2]) >= float(rows["kan"][2])
        assert float(rows["hybrid"][2]) >= 0.97

    def test_confusion_csv_reproduces_json(self, golden_run):
        for kind in ("mlp", "kan", "hybrid"):
            cm, names = read_confusion_csv(golden_run["compare"] / f"confusion_{kind}.csv")
            saved = json.loads((golden_run["compare"] / f"report_{kind}.json").read_text())
            again = EvalReport(cm, names)
            assert cm.shape == (11, 11)
            assert abs(again.accuracy - saved["accuracy"]) < 1e-9
            for avg, metrics in saved["averages"].items():
                for m, v in metrics.items():
                    assert abs(again.averages[avg][m] - v) < 1e-9

    def test_train_accuracy_not_below_test(self, golden_run, tmp_path):
        model = golden_run["compare"] / "models" / "hybrid"
        for split in ("train", "test"):
            assert run("eval", "--data", golden_run["data"], "--model-dir", model, "--split", split,
                       "--out", tmp_path) == 0
        acc = {s: json.loads((tmp_path / f"report_{s}.json").read_text())["accuracy"] for s in ("train", "test")}
        assert acc["train"] >= acc["test"]


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert run("prepare", "--config", tmp_path / "absent.ini", "--out", tmp_path) == cli.EXIT_CONFIG

    def test_bad_value(self, tmp_path, tiny):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[train]\nepochs = many\n")
        assert run("train", "--config", cfg, "--data", tiny["data"], "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_missing_data_dir(self, tmp_path):
        assert run("compare", "--data", tmp_path / "nope", "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_paper_profile_needs_source_dir(self, tmp_path):
        assert run("prepare", "--profile", "paper", "--out", tmp_path) == cli.EXIT_CONFIG

    def test_unprepared_data_dir(self, tmp_path):
        (tmp_path / "d").mkdir()
        assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_bad_csv(self, tmp_path, capsys):
        src = tmp_path / "src"
        src.mkdir()
        (src / "synth-0.benign.csv").write_text("a,b\n1,2\n")
        cfg = tmp_path / "c.ini"
        cfg.write_text(f"[data]\nsource = nbaiot\nsource_dir = {src}\n\n[sampling]\ndevices = synth-0\n")
        assert run("prepare", "--profile", "paper", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_DATA
        assert "synth-0.benign.csv" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, tiny, capsys):
        cfg = write_config(tmp_path / "lr.ini", train={"learning_rate": "1e300"})
        code = run("train", "--config", cfg, "--data", tiny["data"], "--model", "mlp", "--out", tmp_path / "o")
        assert code == cli.EXIT_NUMERIC
        assert "diverged in epoch" in capsys.readouterr().err
