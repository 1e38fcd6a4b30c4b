import csv
import json
import subprocess
import sys

import pytest

import salforge.evalharness as eh
from salforge import cli
from salforge.synthdata import dataset_hash


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = write_json(root / "gen.json", {"preset": "squares", "n_per_class": 6, "seed": 1,
                                         "fractions": [0.5, 0.25, 0.25]})
    assert cli.dispatch(["gen-data", "--config", str(gen), "--out", str(root / "data")]) == 0
    tr = write_json(root / "train.json", {"arch": "micro-res", "train": {"epochs": 1, "batch_size": 4}})
    assert cli.dispatch(["train", "--config", str(tr), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def manifest(out):
    return json.loads((out / "run-manifest.json").read_text())


def test_unknown_subcommand(tmp_path, capsys):
    assert cli.dispatch(["frobnicate", "--out", str(tmp_path / "x")]) == 1
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()
    assert cli.dispatch([]) == 1


def test_missing_config_writes_nothing(tmp_path):
    out = tmp_path / "out"
    assert cli.dispatch(["gen-data", "--out", str(out)]) == 1
    assert not out.exists()
    assert cli.dispatch(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 1
    assert not out.exists()


def test_unknown_config_key(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"preset": "squares", "colour": "red"})
    assert cli.dispatch(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg = write_json(tmp_path / "e.json", {"archs": ["micro-res"], "methods": ["ixg"], "data": "x", "taus": 3})
    assert cli.dispatch(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg = write_json(tmp_path / "f.json", {"preset": "squares", "fractions": [0.5, 0.5, 0.5]})
    assert cli.dispatch(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    assert (data / "manifest.json").is_file() and (data / "annotations.jsonl").is_file()
    m = manifest(data)
    assert m["status"] == "ok" and m["command"] == "gen-data" and m["seeds"] == {"data": 1}
    assert json.loads((data / "config.json").read_text())["fractions"] == [0.5, 0.25, 0.25]
    assert len((data / "annotations.jsonl").read_text().splitlines()) == 12


def test_train_outputs(workspace):
    run = workspace / "run"
    rep = json.loads((run / "train_report.json").read_text())
    assert (run / "model.ckpt").is_file() and len(rep["epoch_losses"]) == 1
    assert "test_accuracy" in rep and "test_auc" in rep


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "c.json", {"preset": "squares", "n_per_class": 6, "seed": 5, "fractions": [0.5, 0.25, 0.25]})

    def seed_of(extra, name):
        assert cli.dispatch(["gen-data", "--config", str(cfg), "--out", str(tmp_path / name)] + extra) == 0
        return manifest(tmp_path / name)["config"]["seed"]

    assert seed_of([], "a") == 5
    monkeypatch.setenv("SALFORGE_SEED", "9")
    assert seed_of([], "b") == 9
    assert seed_of(["--seed", "3"], "c") == 3
    monkeypatch.setenv("SALFORGE_SEED", "x")
    assert cli.dispatch(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1


def test_pointing_game_one_row(workspace):
    out = workspace / "pg"
    before = dataset_hash(workspace / "data")
    code = cli.dispatch(["pointing-game", "--model", str(workspace / "run" / "model.ckpt"), "--data",
                         str(workspace / "data"), "--method", "normgrad-conv3x3-combined", "--tau", "15",
                         "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "pointing.csv")
    assert len(rows) == 1 and rows[0]["method"] == "normgrad-conv3x3-combined" and rows[0]["tau"] == "15"
    assert int(rows[0]["hits"]) + int(rows[0]["misses"]) > 0
    assert manifest(out)["inputs"]["model_sha256"]
    assert dataset_hash(workspace / "data") == before


def test_pointing_game_errors(workspace, tmp_path):
    base = ["pointing-game", "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]
    assert cli.dispatch(base + ["--method", "ixg"]) == 1  # no --model
    assert cli.dispatch(base + ["--model", str(workspace / "run" / "model.ckpt"), "--method", "lime"]) == 1
    assert cli.dispatch(base + ["--model", str(tmp_path / "none.ckpt"), "--method", "ixg"]) == 1


def test_saliency_and_report_overlays(workspace):
    out = workspace / "sal"
    code = cli.dispatch(["saliency", "--model", str(workspace / "run" / "model.ckpt"), "--data",
                         str(workspace / "data"), "--method", "gradcam", "--method", "ixg", "--format", "both",
                         "--limit", "2", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "maps.csv")
    assert len(rows) == 4
    assert len(list((out / "maps" / "gradcam").glob("*.pgm"))) == 2
    assert len(list((out / "maps" / "ixg").glob("*.f64"))) == 2


def test_manifest_written_on_runtime_failure(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    out = tmp_path / "o"
    code = cli.dispatch(["pointing-game", "--model", str(bad), "--data", str(workspace / "data"),
                         "--method", "ixg", "--out", str(out)])
    assert code in (1, 2)
    m = manifest(out)
    assert m["status"] == "failed" and m["error"]
    assert (out / "config.json").is_file()


def grid_config(tmp_path, workspace, **kw):
    doc = {"data": str(workspace / "data"), "archs": ["micro-res"], "methods": ["gradcam"],
           "conditions": ["FR"], "n_seeds": 1, "tau": 4, "workers": 1}
    doc.update(kw)
    return write_json(tmp_path / "grid.json", doc)


def test_grid_single_cell(workspace, tmp_path):
    out = tmp_path / "g"
    assert cli.dispatch(["experiment", "--config", str(grid_config(tmp_path, workspace)), "--out", str(out)]) == 0
    rows = read_csv(out / "randomization_micro-res.csv")
    assert len(rows) == 1 and rows[0]["condition"] == "FR" and rows[0]["n"] == "1"
    assert not (out / "dom.csv").exists() and not (out / "smoothing.csv").exists()
    eh.load_report_json(out / "report.json")


def test_grid_two_archs_dom_rows(workspace, tmp_path):
    out = tmp_path / "g"
    cfg = grid_config(tmp_path, workspace, archs=["micro-res", "micro-eff"], methods=["gradcam", "ixg"],
                      conditions=["Repeated"], train={"epochs": 1, "batch_size": 4})
    assert cli.dispatch(["experiment", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "dom.csv")
    assert [r["method"] for r in rows] == ["gradcam", "ixg"]
    assert len(read_csv(out / "smoothing.csv")) == 4
    assert (out / "cells" / "micro-eff__Repeated__0.ckpt").is_file()
    doc = json.loads((out / "report.json").read_text())
    assert len(doc["dom"]) == 2 and doc["failures"] == []

    # report re-emits the same tables from report.json
    rep = tmp_path / "rep"
    assert cli.dispatch(["report", "--input", str(out / "report.json"), "--out", str(rep)]) == 0
    assert (rep / "dom.csv").read_bytes() == (out / "dom.csv").read_bytes()
    assert (rep / "randomization_micro-eff.csv").read_bytes() == (out / "randomization_micro-eff.csv").read_bytes()


def test_grid_partial_failure(workspace, tmp_path, monkeypatch):
    real = eh.run_cell

    def flaky(arch, condition, seed, *a, **kw):
        if seed == 1:
            raise RuntimeError("boom")
        return real(arch, condition, seed, *a, **kw)

    monkeypatch.setattr(eh, "run_cell", flaky)
    out = tmp_path / "g"
    cfg = grid_config(tmp_path, workspace, n_seeds=2)
    assert cli.dispatch(["experiment", "--config", str(cfg), "--out", str(out)]) == 2
    doc = json.loads((out / "report.json").read_text())
    assert doc["failures"] == [{"cell": "micro-res__FR__1", "error": "RuntimeError: boom"}]
    assert doc["reports"][0]["n_runs"] == 1
    assert manifest(out)["status"] == "partial"


def test_grid_rerun_byte_identical(workspace, tmp_path):
    cfg = grid_config(tmp_path, workspace, methods=["ixg", "normgrad-bias-combined"], conditions=["FR", "SR"],
                      n_seeds=2, donor={"n_per_class": 4, "epochs": 1})
    for name in ("a", "b"):
        assert cli.dispatch(["experiment", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in ("randomization_micro-res.csv", "report.csv", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert manifest(tmp_path / "a")["config_hash"] == manifest(tmp_path / "b")["config_hash"]


def test_config_hash_ignores_workers():
    assert cli.config_hash({"a": 1, "workers": 4}) == cli.config_hash({"a": 1})
    assert cli.config_hash({"a": 1}) != cli.config_hash({"a": 2})


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "salforge.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout
    r = subprocess.run(["salforge", "bogus"], capture_output=True, text=True)
    assert r.returncode == 1
