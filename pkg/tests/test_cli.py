import json
from pathlib import Path

import numpy as np
import pytest

from spongelab import cli, model as M, reports
from spongelab.tensorio import load_tensor, save_tensor, write_ppm

from .conftest import tiny_arch

TINY_DATA = "synth:n=40,seed=3"


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree(out):
    """Map of relative path -> bytes for every reproducible output file."""
    out = Path(out)
    return {str(p.relative_to(out)): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "timing.json"}


@pytest.fixture(scope="module")
def tiny_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    arch = root / "arch.json"
    blocks = tiny_arch().blocks[:-1] + (M.Classifier(6),)  # one class per synthetic noise level
    arch.write_text(json.dumps(M.ArchSpec((3, 32, 32), blocks, 0).to_dict()))
    assert run("build", "--arch", arch, "--data", TINY_DATA, "--calib-size", 20, "--out", root / "m") == 0
    return root, arch, root / "m" / "model.spmd"


def test_build_reproducible(tiny_files, tmp_path):
    root, arch, model = tiny_files
    assert run("build", "--arch", arch, "--data", TINY_DATA, "--calib-size", 20, "--out", tmp_path) == 0
    assert tree(tmp_path) == tree(root / "m")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "build" and "model.spmd" in manifest["outputs"]


def test_attack_uniform_byte_identical(tiny_files, tmp_path):
    _, _, model = tiny_files
    outs = []
    for i, threads in enumerate([1, 1, 3]):
        out = tmp_path / f"run{i}"
        assert run("attack", "--model", model, "--strategy", "uniform", "--n", 100, "--seed", 7,
                   "--threads", threads, "--out", out) == 0
        outs.append(tree(out))
    assert outs[0] == outs[1] == outs[2]
    assert len([k for k in outs[0] if k.startswith("images/")]) == 100
    timing = json.loads((tmp_path / "run0" / "timing.json").read_text())
    assert timing["per_sample_mean_s"] >= 0


@pytest.mark.parametrize("strategy,extra", [
    ("ga", ["--pool-size", 4, "--iterations", 3]),
    ("lbfgs", ["--steps", 3]),
    ("top-natural", ["--data", TINY_DATA]),
])
def test_other_strategies_reproducible(tiny_files, tmp_path, strategy, extra):
    _, _, model = tiny_files
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("attack", "--model", model, "--strategy", strategy, "--n", 3, *extra, "--out", a) == 0
    assert run("attack", "--model", model, "--strategy", strategy, "--n", 3, *extra,
               "--threads", 2, "--out", b) == 0
    assert tree(a) == tree(b)
    index = json.loads((a / "sponges.json").read_text())
    assert index["n"] == 3 and index["strategy"] == strategy
    for s in index["samples"]:
        img = load_tensor(a / s["image"])
        assert img.shape == (3, 32, 32) and 0 <= img.min() and img.max() <= 1


def test_thresholds_on_fresh_model(tmp_path):
    assert run("build", "--no-calibrate", "--out", tmp_path / "m") == 0
    assert run("analyze", "--model", tmp_path / "m" / "model.spmd", "--what", "thresholds",
               "--out", tmp_path / "a") == 0
    header, rows = reports.read_csv(tmp_path / "a" / "thresholds.csv")
    assert "model" in header and len(rows) == 3 * 16 + 3 * 32
    assert all(float(r["theta"]) == 0.0 and r["direction"] == "pos_above" for r in rows)


@pytest.mark.parametrize("what,fname", [("density", "density.csv"), ("gains", "gains.csv"),
                                        ("channel-stats", "channel_stats.csv")])
def test_analyze_outputs(tiny_files, tmp_path, what, fname):
    _, _, model = tiny_files
    assert run("analyze", "--model", model, "--what", what, "--inputs", "synth:n=5,seed=1",
               "--out", tmp_path / "a") == 0
    assert run("analyze", "--model", model, "--what", what, "--inputs", "synth:n=5,seed=1",
               "--threads", 2, "--out", tmp_path / "b") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    header, rows = reports.read_csv(tmp_path / "a" / fname)
    assert rows and header["inputs"] == "synth:n=5,seed=1"


def test_analyze_image_directory_and_bundle(tiny_files, tmp_path):
    _, _, model = tiny_files
    d = tmp_path / "imgs"
    d.mkdir()
    rng = np.random.default_rng(0)
    write_ppm(d / "a.ppm", rng.integers(0, 256, (3, 32, 32)) / 255)
    save_tensor(d / "b.sptn", rng.random((3, 32, 32)))
    assert run("analyze", "--model", model, "--what", "density", "--inputs", d, "--out", tmp_path / "o") == 0
    _, rows = reports.read_csv(tmp_path / "o" / "density.csv")
    assert [r["image"] for r in rows] == ["a.ppm", "b.sptn"]
    assert run("attack", "--model", model, "--n", 2, "--mu", 0.5, "--out", tmp_path / "s") == 0
    assert run("analyze", "--model", model, "--what", "density", "--inputs", tmp_path / "s",
               "--out", tmp_path / "o2") == 0
    _, rows = reports.read_csv(tmp_path / "o2" / "density.csv")
    assert [r["image"] for r in rows] == ["sponge0000", "sponge0001"]


def test_study_and_transfer(tiny_files, tmp_path):
    _, _, model = tiny_files
    assert run("study", "--model", model, "--data", "synth:n=12,seed=2", "--out", tmp_path / "st") == 0
    header, rows = reports.read_csv(tmp_path / "st" / "study.csv")
    assert len(rows) == 12 and header["window"] == "8" and header["stride"] == "4"
    assert run("attack", "--model", model, "--n", 3, "--mu", 0.4, "--out", tmp_path / "s") == 0
    for out in ("t1", "t2"):
        assert run("transfer", "--models", model, model, "--bundles", tmp_path / "s",
                   "--baseline-data", "synth:n=6,seed=1", "--out", tmp_path / out) == 0
    assert tree(tmp_path / "t1") == tree(tmp_path / "t2")
    _, rows = reports.read_csv(tmp_path / "t1" / "transfer.csv")
    assert len(rows) == 2 and rows[0]["percent_increase"] == rows[1]["percent_increase"]


def test_config_file_and_flag_precedence(tiny_files, tmp_path):
    _, _, model = tiny_files
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 4, "mu": 0.2, "seed": 3}))
    assert run("attack", "--model", model, "--config", cfg, "--n", 2, "--out", tmp_path / "o") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["n"] == 2 and manifest["config"]["mu"] == 0.2
    assert manifest["config"]["seed"] == 3


def test_exit_codes(tiny_files, tmp_path, capsys):
    _, _, model = tiny_files
    assert run("attack", "--model", tmp_path / "missing.spmd", "--out", tmp_path / "o") == 2
    bad = tmp_path / "bad.spmd"
    bad.write_bytes(model.read_bytes()[:200])
    assert run("attack", "--model", bad, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "bad.spmd" in err and "offset" in err
    assert run("attack", "--model", model, "--n", 0, "--out", tmp_path / "o") == 1
    assert ">= 1" in capsys.readouterr().err
    assert run("attack", "--model", model, "--strategy", "magic", "--out", tmp_path / "o") == 1
    assert run("attack", "--model", model, "--sigma", 0, "--mu", 0.5, "--out", tmp_path / "o") == 1
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert run("attack", "--model", model, "--config", cfg, "--out", tmp_path / "o") == 2
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("attack", "--model", model, "--config", cfg, "--out", tmp_path / "o") == 1
    assert run("attack", "--model", model, "--strategy", "top-natural", "--out", tmp_path / "o") == 1
    assert run("build", "--data", "synth:n=3,colour=2", "--out", tmp_path / "o") == 1
    assert run("--version") == 0


def test_finetune_small(tiny_files, tmp_path):
    _, _, model = tiny_files
    argv = ["finetune", "--model", model, "--data", "synth:n=200,seed=11", "--train-size", 10,
            "--val-size", 5, "--steps", 5, "--repeats", 2]
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--threads", 2, "--out", tmp_path / "b") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    report = json.loads((tmp_path / "a" / "finetune_report.json").read_text())
    assert set(report["runs"]) == {"uniform_freeze0", "random_freeze0", "uniform_freeze1", "random_freeze1"}
    assert all(len(r["changes"]) == 2 for r in report["runs"].values())
    assert report["sparsity_change"] == report["runs"]["uniform_freeze0"]["change"]
    assert M.load(tmp_path / "a" / "model.spmd").arch == M.load(model).arch
    assert run(*argv[:-2], "--repeats", 0, "--out", tmp_path / "c") == 1
    assert run("finetune", "--model", model, "--data", "synth:n=20,seed=11", "--out", tmp_path / "d") == 2
