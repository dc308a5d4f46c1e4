import json

import numpy as np
import pytest

from fedbaf import checkpoint
from fedbaf import config as config_io
from fedbaf.cli import main
from fedbaf.model import init_params
from fedbaf.federation import build_schema
from fedbaf.rng import stream


@pytest.fixture
def workspace(tmp_path, tiny_config, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tiny_config.replace(
        strategy={"foundation": "fedbaf", "foundation_path": "found.fbaf"},
        pretrain={"out": "found.fbaf"},
        run={"out": "out/fb"},
    )
    config_io.save(cfg, "fb.ini")
    config_io.save(cfg.replace(strategy={"foundation": "none"}, run={"out": "out/none"}), "none.ini")
    config_io.save(cfg.replace(strategy={"foundation": "weight_init"}, run={"out": "out/wi"}), "wi.ini")
    assert main(["pretrain", "--config", "fb.ini"]) == 0
    return tmp_path


def test_pretrain_zero_epochs_is_initialization(workspace, tiny_config):
    cfg = config_io.load("fb.ini").replace(pretrain={"epochs": 0})
    config_io.save(cfg, "zero.ini")
    assert main(["pretrain", "--config", "zero.ini", "--out", "zero.fbaf"]) == 0
    w0 = init_params(build_schema(cfg, 5, 4), stream(cfg.pretrain.seed, "pretrain-init"))
    assert checkpoint.load("zero.fbaf").values.tobytes() == w0.values.tobytes()


def test_pretrain_is_byte_reproducible(workspace):
    assert main(["pretrain", "--config", "fb.ini", "--out", "again.fbaf"]) == 0
    assert (workspace / "again.fbaf").read_bytes() == (workspace / "found.fbaf").read_bytes()


def test_run_layout(workspace, capsys):
    assert main(["run", "--config", "fb.ini"]) == 0
    out = workspace / "out" / "fb"
    for name in ("config.snapshot", "rounds.csv", "summary.json", "records.json"):
        assert (out / name).is_file()
    assert (out / "checkpoints" / "final.fbaf").is_file() and (out / "analysis").is_dir()
    header = (out / "rounds.csv").read_text().splitlines()[0].split(",")
    assert "alpha" not in header
    assert "alpha" not in json.loads((out / "records.json").read_text())[0]
    assert config_io.load(out / "config.snapshot") == config_io.load("fb.ini")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rounds"] == 5 and "data_hash" in summary


def test_debug_alpha_and_overrides(workspace):
    assert main(["run", "--config", "fb.ini", "--debug-alpha", "--seed", "9", "--out", "dbg"]) == 0
    header = (workspace / "dbg" / "rounds.csv").read_text().splitlines()[0].split(",")
    assert header[-1] == "alpha"
    assert config_io.load(workspace / "dbg" / "config.snapshot").run.seed == 9


def test_trials(workspace):
    assert main(["run", "--config", "fb.ini", "--trials", "3", "--out", "tri"]) == 0
    summary = json.loads((workspace / "tri" / "summary.json").read_text())
    assert len(summary["trials"]) == 3
    finals = [t["final_global_acc"] for t in summary["trials"]]
    assert summary["best_of_trials"]["final_global_acc"] == max(finals)
    assert [t["seed"] for t in summary["trials"]] == [0, 1, 2]
    for i in range(3):
        assert (workspace / "tri" / f"trial_{i}" / "rounds.csv").is_file()


def test_weight_init_dist_starts_at_zero(workspace):
    assert main(["run", "--config", "wi.ini"]) == 0
    assert main(["analyze", "--config", "wi.ini", "--checks", "dist"]) == 0
    report = json.loads((workspace / "out" / "wi" / "analysis" / "report.json").read_text())
    assert report["dist"]["rounds"][0] == {"model": 0, "dist": 0.0}


def test_analyze_empty(workspace):
    assert main(["run", "--config", "fb.ini"]) == 0
    assert main(["analyze", "--config", "fb.ini"]) == 0
    assert json.loads((workspace / "out" / "fb" / "analysis" / "report.json").read_text()) == {}


def test_analyze_requires_retention(workspace, capsys):
    assert main(["run", "--config", "fb.ini"]) == 0
    assert main(["analyze", "--config", "fb.ini", "--checks", "prop2"]) == 4
    assert "retain_client_models" in capsys.readouterr().err


def test_analyze_extraction_pair(workspace):
    cfg = config_io.load("fb.ini").replace(run={"retain_models": True})
    config_io.save(cfg.replace(run={"out": "out/rand"}), "rand.ini")
    config_io.save(cfg.replace(strategy={"static_alpha": True}, run={"out": "out/static"}), "static.ini")
    assert main(["run", "--config", "rand.ini"]) == 0
    assert main(["run", "--config", "static.ini"]) == 0
    assert main(["analyze", "--config", "rand.ini", "--checks", "extraction"]) == 4
    assert main(["analyze", "--config", "rand.ini", "--checks", "extraction",
                 "--pair", "out/static"]) == 0
    report = json.loads((workspace / "out" / "rand" / "analysis" / "report.json").read_text())
    assert report["extraction"]["error_static"] < 1e-4
    assert report["extraction"]["error_random"] > report["extraction"]["error_static"]


def test_analyze_all_with_retention(workspace):
    cfg = config_io.load("fb.ini").replace(
        data={"spread": 2.0}, run={"retain_client_models": True, "chi_diagnostic": True})
    config_io.save(cfg, "full.ini")
    assert main(["run", "--config", "full.ini"]) == 0
    assert main(["analyze", "--config", "full.ini", "--checks", "all"]) == 0
    report = json.loads((workspace / "out" / "fb" / "analysis" / "report.json").read_text())
    assert set(report) == {"prop1", "prop2", "dist", "noise", "chi", "mac"}
    assert report["prop2"]["pass"]
    assert (workspace / "out" / "fb" / "analysis" / "summary.txt").read_text().startswith("prop1")


def test_compare(workspace, capsys):
    assert main(["compare", "--config", "none.ini", "--config", "fb.ini", "--trials", "2",
                 "--out", "cmp"]) == 0
    report = json.loads((workspace / "cmp" / "comparison.json").read_text())
    assert [a["arm"] for a in report["arms"]] == ["none", "fb"]
    assert all(len(a["final_global_acc"]) == 2 for a in report["arms"])
    assert set(report["hashes"]) == {"train", "test"}
    assert (workspace / "cmp" / "fb" / "trial_1" / "rounds.csv").is_file()


def test_compare_identical_arms_and_zero_threshold(workspace):
    assert main(["compare", "--config", "fb.ini", "--config", "fb.ini", "--threshold", "0",
                 "--trials", "1", "--out", "same"]) == 0
    report = json.loads((workspace / "same" / "comparison.json").read_text())
    a, b = report["arms"]
    assert {k: v for k, v in a.items() if k != "arm"} == {k: v for k, v in b.items() if k != "arm"}
    assert a["threshold_round"] == [0]


def test_compare_rejects_mismatched_arms(workspace):
    cfg = config_io.load("none.ini").replace(partition={"seed": 5})
    config_io.save(cfg, "other.ini")
    assert main(["compare", "--config", "fb.ini", "--config", "other.ini"]) == 2


def test_config_errors(workspace, capsys):
    assert main(["run", "--config", "missing.ini"]) == 2
    (workspace / "bad.ini").write_text("[training]\nrounds = lots\n")
    assert main(["run", "--config", "bad.ini"]) == 2
    cfg = config_io.load("fb.ini").replace(strategy={"foundation_path": "nope.fbaf"})
    config_io.save(cfg, "nofound.ini")
    assert main(["run", "--config", "nofound.ini"]) == 2
    assert main(["analyze", "--config", "fb.ini", "--checks", "bogus"]) == 2


def test_runtime_abort(workspace, capsys):
    cfg = config_io.load("fb.ini").replace(training={"lr": 0.0})
    config_io.save(cfg, "stall.ini")
    assert main(["run", "--config", "stall.ini"]) == 3
    assert "tau_0" in capsys.readouterr().err


def test_analyze_missing_run_dir(workspace):
    assert main(["analyze", "--run-dir", "does/not/exist", "--checks", "dist"]) == 4
