import csv
import json

import numpy as np
import pytest

from routetime.cli import main
from routetime.network import load_arc_table, load_network


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("generate", "--grid", "3x3", "--trips", 60, "--seed", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def estimated(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("est")
    code = run("estimate", "--network", generated / "network.txt", "--obs", generated / "train.obs",
               "--t-true", generated / "t_true.csv", "--max-iters", 20, "-K", 10, "--out", out)
    assert code == 0
    return out


class TestTwoArc:
    def test_trace(self, tmp_path):
        assert run("two-arc-demo", "--out", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "two_arc_trace.csv", encoding="utf-8")))
        assert len(rows) == 11
        assert float(rows[10]["expected_time_x"]) > 100
        assert float(rows[10]["expected_loss_x"]) == pytest.approx(2.0, abs=1e-6)
        summary = json.loads((tmp_path / "two_arc_summary.json").read_text())
        assert summary["joint_msle"] < summary["fixed_point_msle"]
        assert (tmp_path / "two_arc.png").exists()
        assert (tmp_path / "two_arc_scan.csv").exists()

    def test_no_figures_and_rerun(self, tmp_path):
        assert run("two-arc-demo", "--no-figures", "--out", tmp_path) == 0
        assert not list(tmp_path.glob("*.png"))
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        assert run("two-arc-demo", "--no-figures", "--out", tmp_path) == 0
        assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}


class TestGenerate:
    def test_files(self, generated):
        for name in ("network.txt", "t_true.csv", "train.obs", "val.obs", "test.obs", "manifest.json",
                     "t_true.png"):
            assert (generated / name).exists(), name
        manifest = json.loads((generated / "manifest.json").read_text())
        assert manifest["counts"] == {"train": 60, "val": 60, "test": 60}
        net = load_network(generated / "network.txt")
        assert len(load_arc_table(generated / "t_true.csv", "T_true")) == net.n_arcs

    def test_reproducible(self, generated, tmp_path):
        assert run("generate", "--grid", "3x3", "--trips", 60, "--seed", 1, "--out", tmp_path,
                   "--no-figures") == 0
        for name in ("network.txt", "t_true.csv", "train.obs", "val.obs", "test.obs"):
            assert (tmp_path / name).read_bytes() == (generated / name).read_bytes(), name


class TestEstimate:
    def test_outputs(self, estimated, generated):
        for name in ("times.csv", "params.json", "trace.csv", "fit_summary.json", "manifest.json",
                     "trace.png", "times.png"):
            assert (estimated / name).exists(), name
        params = json.loads((estimated / "params.json").read_text())
        assert len(params["b"]) == 5 and params["b"][4] == -5.0
        T = load_arc_table(estimated / "times.csv", "T")
        t_min = load_arc_table(generated / "t_true.csv", "t_min")
        t_max = load_arc_table(generated / "t_true.csv", "t_max")
        assert np.all((T >= t_min) & (T <= t_max))
        summary = json.loads((estimated / "fit_summary.json").read_text())
        assert summary["iterations"] == 20 and "t_rmsle" in summary

    def test_no_paths(self, generated, tmp_path):
        code = run("estimate", "--network", generated / "network.txt", "--obs", generated / "train.obs",
                   "--no-paths", "--max-iters", 5, "-K", 5, "--estimator", "offline", "--no-figures",
                   "--out", tmp_path)
        assert code == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["with_paths"] is False
        assert manifest["estimator_config"]["estimator"] == "offline"

    def test_evaluate(self, estimated, generated, tmp_path):
        code = run("evaluate", "--network", generated / "network.txt", "--obs", generated / "test.obs",
                   "--model", estimated, "-K", 20, "--out", tmp_path)
        assert code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert {"rmsle_geomean", "rmsle_mode", "rmsle_mean", "heldout_loglik"} <= set(summary)
        assert (tmp_path / "report.csv").exists() and (tmp_path / "predictions.png").exists()

    def test_predict(self, estimated, generated, tmp_path):
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("o,d\n0,8\n2,6\n")
        assert run("predict", "--network", generated / "network.txt", "--model", estimated,
                   "--pairs", pairs, "--out", tmp_path / "p") == 0
        rows = list(csv.DictReader(open(tmp_path / "p" / "predictions.csv", encoding="utf-8")))
        assert [(r["o"], r["d"]) for r in rows] == [("0", "8"), ("2", "6")]
        assert all(float(r["geomean"]) > 0 for r in rows)

    def test_search(self, generated, tmp_path):
        code = run("search", "--network", generated / "network.txt", "--obs", generated / "train.obs",
                   "--val", generated / "val.obs", "--budget", 2, "--include-default", "--max-iters", 5,
                   "-K", 5, "--out", tmp_path)
        assert code == 0
        assert len((tmp_path / "leaderboard.csv").read_text().splitlines()) == 3
        assert "eta" in json.loads((tmp_path / "best_config.json").read_text())


class TestExitCodes:
    def test_missing_input(self, tmp_path, capsys):
        assert run("estimate", "--network", tmp_path / "nope.txt", "--obs", tmp_path / "x", "--out", tmp_path) == 2
        assert "input not found" in capsys.readouterr().err

    def test_bad_grid(self, tmp_path):
        assert run("generate", "--grid", "ten", "--out", tmp_path) == 2

    def test_unknown_subcommand(self, tmp_path):
        assert run("frobnicate", "--out", tmp_path) == 2

    def test_bad_threads(self, tmp_path):
        assert run("two-arc-demo", "--threads", 0, "--out", tmp_path) == 2

    def test_runtime_failure(self, tmp_path, capsys):
        bad = tmp_path / "net.txt"
        bad.write_text("not a network\n")
        obs = tmp_path / "o.obs"
        obs.write_text("o=0,d=1,t=1\n")
        assert run("estimate", "--network", bad, "--obs", obs, "--out", tmp_path / "o") == 1
        assert capsys.readouterr().err.startswith("error:")


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ROUTETIME_THREADS", "3")
    assert run("two-arc-demo", "--no-figures", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["threads"] == 3
