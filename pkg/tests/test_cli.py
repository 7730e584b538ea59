import csv
import json

import numpy as np
import pytest
import torch
from matplotlib.axes import Axes
from PIL import Image

from asos.activation_space import SensitivityIndex, activation_maps
from asos.cli import EXIT_CONFIG, EXIT_DATA, main
from asos.data import load_dataset, stack_samples, write_tile
from asos.model import load_checkpoint
from asos.training import correctly_classified

from oracles import naive_sensitivities

TRAIN_YAML = "epochs: 5\nbatch_size: 8\nwidths: [4, 4, 4, 4]\nbottleneck: 8\n"
ANALYZE_YAML = "fraction: 0.05\nmin_occluded: 2\n"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "train.yaml").write_text(TRAIN_YAML)
    (root / "analyze.yaml").write_text(ANALYZE_YAML)
    assert run("synth", "--out", root / "data", "--n-samples", 60, "--seed", 2) == 0
    manifest = root / "data" / "manifest.csv"
    # 12-tile site groups: 60/20/20 leaves room for every subset
    assert run("split", "--manifest", manifest, "--fractions", "0.6,0.2,0.2", "--out", root / "split.csv") == 0
    assert run("train", "--manifest", manifest, "--split", root / "split.csv", "--config", root / "train.yaml",
               "--out", root / "model") == 0
    assert run("analyze", "--checkpoint", root / "model" / "model.pt", "--manifest", manifest,
               "--split", root / "split.csv", "--config", root / "analyze.yaml", "--out", root / "analysis") == 0
    return root


def test_synth_outputs(pipeline):
    samples = load_dataset(pipeline / "data", pipeline / "data" / "manifest.csv")
    assert len(samples) == 120
    assert {s.label for s in samples} == {0.0, 1.0}


def test_split_file(pipeline, tmp_path):
    rows = list(csv.DictReader(open(pipeline / "split.csv")))
    assert {r["subset"] for r in rows} == {"train", "val", "test"}
    manifest = pipeline / "data" / "manifest.csv"
    assert run("split", "--manifest", manifest, "--fractions", "0.6,0.2,0.2", "--out", tmp_path / "again.csv") == 0
    assert (tmp_path / "again.csv").read_bytes() == (pipeline / "split.csv").read_bytes()
    record = json.loads((pipeline / "split.csv.run.json").read_text())
    assert record["subcommand"] == "split" and record["seed"] == 0


def test_train_outputs(pipeline):
    lines = (pipeline / "model" / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,train_acc,val_acc"
    assert len(lines) == 1 + 5
    record = json.loads((pipeline / "model" / "run_manifest.json").read_text())
    # file values override defaults; untouched defaults remain
    assert record["config"]["epochs"] == 5 and record["config"]["widths"] == [4, 4, 4, 4]
    assert record["config"]["max_lr"] == 0.01
    assert "duration_seconds" in record and record["tool_version"]


def test_flags_override_file(pipeline, tmp_path):
    manifest = pipeline / "data" / "manifest.csv"
    assert run("train", "--manifest", manifest, "--config", pipeline / "train.yaml", "--epochs", 1,
               "--out", tmp_path / "m") == 0
    assert len((tmp_path / "m" / "history.csv").read_text().splitlines()) == 2
    assert json.loads((tmp_path / "m" / "run_manifest.json").read_text())["config"]["epochs"] == 1


def test_analyze_outputs(pipeline):
    out = pipeline / "analysis"
    for name in ("index.npz", "cubes.csv", "activation_space.png", "sensitivities.png", "run_manifest.json"):
        assert (out / name).exists(), name
    for subset in ("train", "val", "test"):
        rows = list(csv.reader(open(out / f"confusion_{subset}.csv")))
        assert rows[0] == ["label", "pred_anthropogenic", "pred_wild"]
        assert len(rows) == 3


def test_analyze_index_matches_oracle(pipeline):
    index = SensitivityIndex.load(pipeline / "analysis" / "index.npz")
    model, _ = load_checkpoint(pipeline / "model" / "model.pt")
    samples = load_dataset(pipeline / "data", pipeline / "data" / "manifest.csv")
    rows = {r["sample_id"]: r["subset"] for r in csv.DictReader(open(pipeline / "split.csv"))}
    X, y = stack_samples([s for s in samples if rows[s.id] == "train"])
    maps, scores = activation_maps(model, X)
    keep = correctly_classified(scores, y)
    cubes = [tuple(c) for c in np.argwhere(index.qualifying)][:12]
    assert cubes
    expected = naive_sensitivities(model.classifier, maps[keep].astype(np.float64), cubes, index.l_cube,
                                   frame=10, min_occluded=2)
    for c in cubes:
        if expected[c] is None:
            assert index.undetermined[c]
        else:
            assert abs(index.eta[c] - expected[c]) < 1e-6  # float32 network


def test_rerun_is_identical(pipeline, tmp_path):
    manifest = pipeline / "data" / "manifest.csv"
    assert run("analyze", "--checkpoint", pipeline / "model" / "model.pt", "--manifest", manifest,
               "--split", pipeline / "split.csv", "--config", pipeline / "analyze.yaml", "--out", tmp_path) == 0
    for name in ("cubes.csv", "confusion_test.csv"):
        assert (tmp_path / name).read_bytes() == (pipeline / "analysis" / name).read_bytes()


def test_map_both_methods(pipeline, tmp_path):
    image = tmp_path / "scene.bin"
    write_tile(image, np.random.default_rng(0).integers(0, 10001, (64, 128, 3)).astype(np.uint16))
    assert run("map", "--checkpoint", pipeline / "model" / "model.pt", "--index",
               pipeline / "analysis" / "index.npz", "--image", image, "--method", "both", "--l-patch", 16,
               "--l-stride", 16, "--out", tmp_path / "maps") == 0
    out = tmp_path / "maps"
    with Image.open(out / "scene_asos.png") as a, Image.open(out / "scene_iios.png") as b:
        assert a.size == (128, 64)
        assert "x10" in b.text["legend"] and "x10" not in a.text["legend"]
        assert float(b.text["bound"]) == pytest.approx(10 * float(a.text["bound"]))
    assert (out / "scene_asos_figure.png").exists() and (out / "scene_iios.npz").exists()


def test_map_iios_padding(pipeline, tmp_path):
    image = tmp_path / "odd.bin"
    write_tile(image, np.random.default_rng(1).integers(0, 10001, (100, 100, 3)).astype(np.uint16))
    assert run("map", "--checkpoint", pipeline / "model" / "model.pt", "--image", image, "--method", "iios",
               "--l-patch", 32, "--l-stride", 32, "--out", tmp_path) == 0
    with np.load(tmp_path / "odd_iios.npz") as z:
        assert z["values"].shape == (128, 128)
        assert z["mask"][100:].all() and not z["mask"][:100, :100].any()


def test_map_asos_needs_divisible(pipeline, tmp_path):
    image = tmp_path / "odd.bin"
    write_tile(image, np.zeros((100, 100, 3), np.uint16))
    code = run("map", "--checkpoint", pipeline / "model" / "model.pt", "--index",
               pipeline / "analysis" / "index.npz", "--image", image, "--out", tmp_path)
    assert code == EXIT_DATA


def test_n_m_one_histogram(pipeline, tmp_path, monkeypatch):
    manifest = pipeline / "data" / "manifest.csv"
    assert run("train", "--manifest", manifest, "--config", pipeline / "train.yaml", "--epochs", 1, "--n-m", 1,
               "--out", tmp_path / "m") == 0
    calls = []
    original = Axes.hist
    monkeypatch.setattr(Axes, "hist", lambda self, *a, **k: calls.append(1) or original(self, *a, **k))
    assert run("analyze", "--checkpoint", tmp_path / "m" / "model.pt", "--manifest", manifest,
               "--config", pipeline / "analyze.yaml", "--out", tmp_path / "a") == 0
    assert calls
    assert (tmp_path / "a" / "activation_space.png").exists()
    assert (tmp_path / "a" / "confusion_all.csv").exists()


def test_missing_data(tmp_path, capsys):
    code = run("train", "--manifest", tmp_path / "nope.csv", "--out", tmp_path / "m")
    assert code == EXIT_DATA
    assert "nope.csv" in capsys.readouterr().err


def test_config_errors(tmp_path, pipeline):
    bad = tmp_path / "bad.yaml"
    bad.write_text("no_such_key: 1\n")
    manifest = pipeline / "data" / "manifest.csv"
    assert run("train", "--manifest", manifest, "--config", bad, "--out", tmp_path) == EXIT_CONFIG
    assert run("split", "--manifest", manifest, "--out", tmp_path / "s.csv", "--fractions", "0.5,0.5") == EXIT_CONFIG
    assert run("synth", "--out", tmp_path, "--size", 40) == EXIT_CONFIG


def test_divergence_exit_code(pipeline, tmp_path):
    manifest = pipeline / "data" / "manifest.csv"
    code = run("train", "--manifest", manifest, "--config", pipeline / "train.yaml", "--max-lr", 1e12,
               "--epochs", 2, "--out", tmp_path)
    assert code == 4


def test_cache_dir(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("ASOS_CACHE_DIR", str(tmp_path / "cache"))
    manifest = pipeline / "data" / "manifest.csv"
    args = ("analyze", "--checkpoint", pipeline / "model" / "model.pt", "--manifest", manifest,
            "--config", pipeline / "analyze.yaml")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert list((tmp_path / "cache").glob("maps-*.npz"))
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "cubes.csv").read_bytes() == (tmp_path / "b" / "cubes.csv").read_bytes()


def test_jobs_flag(tmp_path):
    before = torch.get_num_threads()
    try:
        assert run("--jobs", 1, "synth", "--out", tmp_path, "--n-samples", 2) == 0
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)
