import csv
import json
import subprocess
import sys

import pytest

from ballseg import model as mdl
from ballseg.cli import main
from ballseg.data import load_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("generate", "--out", out, "--count", 24, "--arenas", 4, "--seed", 3) == 0
    return out


TINY_TRAIN = ["--folds", 2, "--fold-index", 0, "--epochs", 2, "--base-channels", 2, "--crop-size", "48x32"]


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", out, *TINY_TRAIN) == 0
    return out


def test_generate_roundtrip_and_determinism(dataset, tmp_path):
    scenes = load_dataset(dataset / "manifest.jsonl")
    assert len(scenes) == 24 and len({s.arena_id for s in scenes}) == 4
    assert run("generate", "--out", tmp_path, "--count", 24, "--arenas", 4, "--seed", 3) == 0
    for name in ["manifest.jsonl"] + [f"images/{p.name}" for p in (dataset / "images").iterdir()]:
        assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes(), name


def test_generate_empty(tmp_path):
    assert run("generate", "--out", tmp_path, "--count", 0) == 0
    assert (tmp_path / "manifest.jsonl").read_text() == ""
    assert load_dataset(tmp_path / "manifest.jsonl") == []


def test_generate_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("generate", "--out", blocker / "sub", "--count", 1) == 1
    assert "error" in capsys.readouterr().err


def test_generate_synth_params_from_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"width": 128, "height": 96}, "count": 2, "arenas": 1}))
    assert run("generate", "--out", tmp_path / "d", "--config", cfg) == 0
    (s, _) = load_dataset(tmp_path / "d" / "manifest.jsonl")
    assert s.size == (128, 96)
    cfg.write_text(json.dumps({"synth": {"colour": 1}, "count": 2, "arenas": 1}))
    assert run("generate", "--out", tmp_path / "e", "--config", cfg) == 1


def test_train_run_directory(trained):
    assert {p.name for p in trained.iterdir()} >= {"config.json", "history.csv", "weights.bsgw"}
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["epochs"] == 2 and cfg["network"]["base_channels"] == 2
    assert cfg["train"]["crop_size"] == [48, 32]
    assert set(cfg["arena_folds"].values()) == {0, 1}
    assert mdl.load_weights(trained / "weights.bsgw").config.base_channels == 2


def test_train_is_deterministic(dataset, trained, tmp_path):
    assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path, *TINY_TRAIN) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_train_fold_index_out_of_range(dataset, tmp_path, capsys):
    assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path, "--folds", 2,
               "--fold-index", 2) == 1
    assert "fold index 2" in capsys.readouterr().err


def test_flags_override_config_file(dataset, tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "base-channels": 2, "crop_size": "48x32", "folds": 2}))
    monkeypatch.setenv("BALLSEG_WORKERS", "3")
    assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "a", "--config", cfg) == 0
    assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "b", "--config", cfg,
               "--epochs", 2, "--workers", 1) == 0
    a = json.loads((tmp_path / "a" / "config.json").read_text())
    b = json.loads((tmp_path / "b" / "config.json").read_text())
    assert (a["epochs"], a["workers"]) == (1, 3)
    assert (b["epochs"], b["workers"]) == (2, 1)
    assert len((tmp_path / "b" / "history.csv").read_text().splitlines()) == 3


def test_detect_topk_one(dataset, trained, tmp_path):
    assert run("detect", "--manifest", dataset / "manifest.jsonl", "--weights", trained / "weights.bsgw",
               "--out", tmp_path, "--topk", 1, "--tau", 0, "--crop-size", "48x32") == 0
    rows = list(csv.DictReader(open(tmp_path / "detections.csv")))
    assert len(rows) == 24
    assert {r["rank"] for r in rows} == {"1"}
    assert json.loads((tmp_path / "config.json").read_text())["topk"] == 1


def evaluate(dataset, trained, out, *extra):
    return run("evaluate", "--manifest", dataset / "manifest.jsonl", "--weights", trained / "weights.bsgw",
               "--out", out, "--folds", 2, "--fold-index", 0, "--crop-size", "48x32", "--hit-crops", 4,
               "--max-crops", 3, *extra)


def test_evaluate_report(dataset, trained, tmp_path):
    assert evaluate(dataset, trained, tmp_path / "a", "--include-train", "--topk", "1,2") == 0
    rep = tmp_path / "a"
    for name in ("roc", "hits", "rate_vs_ncrops"):
        assert (rep / f"{name}.csv").exists() and (rep / f"{name}.svg").exists()
    labels = {r["config"] for r in csv.DictReader(open(rep / "roc.csv"))}
    assert labels == {"model/test/top1/crops1", "model/train/top1/crops1",
                      "model/test/top2/crops1", "model/train/top2/crops1"}
    rate = [float(r["detection_rate"]) for r in csv.DictReader(open(rep / "rate_vs_ncrops.csv"))]
    assert len(rate) == 3 and rate == sorted(rate)
    assert evaluate(dataset, trained, tmp_path / "b", "--include-train", "--topk", "1,2") == 0
    for name in ("roc.csv", "hits.csv", "rate_vs_ncrops.csv", "roc.svg"):
        assert (rep / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_evaluate_all_folds_pools_and_splits(dataset, tmp_path):
    for f in (0, 1):
        assert run("train", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / f"fold{f}",
                   "--folds", 2, "--fold-index", f, "--epochs", 1, "--base-channels", 2, "--crop-size", "48x32") == 0
    assert run("evaluate", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "rep",
               "--weights", f"m={tmp_path}/fold{{fold}}/weights.bsgw", "--folds", 2, "--fold-index", "all",
               "--crop-size", "48x32", "--hit-crops", 2, "--max-crops", 2) == 0
    per_fold = {r["config"] for r in csv.DictReader(open(tmp_path / "rep" / "roc_folds.csv"))}
    assert per_fold == {"m/test/top1/crops1/fold0", "m/test/top1/crops1/fold1"}
    hits = list(csv.DictReader(open(tmp_path / "rep" / "hits.csv")))
    assert len(hits) == 24 * 3


def test_evaluate_channel_mismatch(dataset, trained, tmp_path, capsys):
    assert evaluate(dataset, trained, tmp_path, "--no-use-diff") == 1
    assert "input-channel mismatch" in capsys.readouterr().err


def test_bench(tmp_path):
    assert run("bench", "--out", tmp_path, "--shape", "64x32x6", "--base-channels", 2, "--reps", 10,
               "--repeats", 2, "--hardware", "test rig 9000") == 0
    row = list(csv.DictReader(open(tmp_path / "bench.csv")))[0]
    assert row["hardware"] == "test rig 9000" and row["batch"] == "2" and row["shape"] == "64x32x6"
    assert float(row["mean_fps"]) > 0
    assert (tmp_path / "bench.svg").exists()


def test_bench_rejects_few_reps_and_bad_shape(tmp_path, capsys):
    assert run("bench", "--out", tmp_path, "--reps", 3) == 1
    assert "--reps" in capsys.readouterr().err
    assert run("bench", "--out", tmp_path, "--shape", "60x32x6", "--reps", 10, "--base-channels", 2) == 1
    assert "multiples of 8" in capsys.readouterr().err


def test_module_entry_point_and_usage_errors():
    ok = subprocess.run([sys.executable, "-m", "ballseg", "--version"], capture_output=True, text=True)
    assert ok.returncode == 0 and "ballseg" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "ballseg", "train"], capture_output=True, text=True)
    assert bad.returncode != 0 and "--manifest" in bad.stderr
