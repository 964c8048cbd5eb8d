import json
import os

import numpy as np
import pytest

from wit.checkpoint import read_checkpoint, write_checkpoint
from wit.cli import run

TRAIN_CFG = """batch_size = 8
base_lr = 1e-3
warmup_epochs = 1
max_steps = 4
noise_scale = 1.0
log_every = 0
model.depth = 1
model.hidden_dim = 16
model.heads = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "train.cfg").write_text(TRAIN_CFG)
    (d / "pixel.cfg").write_text(TRAIN_CFG + "model.bottleneck = 8\n")
    assert run(["--quiet", "make-toy-data", "--classes", "3", "--size", "8", "--per-class", "6",
                "--patch-size", "4", "--out", str(d / "data")]) == 0
    assert run(["--quiet", "pca-fit", "--data", str(d / "data"), "--dim", "4", "--feature-dim", "16",
                "--out", str(d / "proj.witc")]) == 0
    assert run(["--quiet", "train-waypoints", "--data", str(d / "data"), "--proj", str(d / "proj.witc"),
                "--config", str(d / "train.cfg"), "--out", str(d / "wp.witc")]) == 0
    assert run(["--quiet", "train-pixel", "--data", str(d / "data"), "--waypoints", str(d / "wp.witc"),
                "--config", str(d / "pixel.cfg"), "--out", str(d / "px.witc")]) == 0
    return d


def test_outputs_and_config_echo(workspace):
    d = workspace
    meta = json.loads((d / "data" / "config.json").read_text())
    assert meta["spec"]["num_classes"] == 3
    assert sorted(p.name for p in (d / "data").iterdir()) == ["00_disk", "01_square", "02_triangle", "config.json"]
    ck = read_checkpoint(d / "px.witc")
    assert ck.kind == "pixel" and ck.config["step"] == 4
    assert ck.config["train"]["batch_size"] == 8 and ck.config["model"]["hidden_dim"] == 16
    assert ck.config["waypoint_model"]["waypoint_dim"] == 4
    assert (d / "px.log.csv").read_text().splitlines()[0] == "step,epoch,loss,lr,grad_norm"
    assert read_checkpoint(d / "wp.witc").config["projection"]["params"]["n_components"] == 4


def test_sample_outputs(workspace, tmp_path):
    d = workspace
    out = tmp_path / "s"
    assert run(["--quiet", "sample", "--ckpt", str(d / "px.witc"), "--class", "1", "--num", "2", "--steps", "3",
                "--cfg-scale", "2", "--cfg-interval", "0.1,1.0", "--out", str(out),
                "--trace", str(tmp_path / "t.jsonl")]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["0000.png", "0001.png", "config.json"]
    echo = json.loads((out / "config.json").read_text())
    assert echo["sampler"]["cfg_scale"] == 2.0 and echo["sampler"]["noise_scale"] == 1.0
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 3


def test_baseline_and_conflict_report(workspace, tmp_path):
    d = workspace
    assert run(["--quiet", "train-pixel", "--data", str(d / "data"), "--no-waypoints",
                "--config", str(d / "pixel.cfg"), "--out", str(tmp_path / "b.witc")]) == 0
    assert read_checkpoint(tmp_path / "b.witc").config["waypoint_model"] is None
    out = tmp_path / "c.csv"
    assert run(["--quiet", "diagnose-conflict", "--ckpt", str(d / "px.witc"), "--ckpt-b", str(tmp_path / "b.witc"),
                "--stride", "1", "--num", "3", "--batches", "1", "--steps", "4", "--out", str(out)]) == 0
    summary = json.loads((tmp_path / "c.json").read_text())
    assert summary["stride"] == 1 and "ratio_other_over_self" in summary
    assert len(out.read_text().splitlines()) == 5
    assert (tmp_path / "c.b.csv").exists()


def test_diagnose_variance_two_point(tmp_path):
    out = tmp_path / "v.json"
    assert run(["--quiet", "diagnose-variance", "--mixture", "two-point", "--t", "0.5", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["identity_residual_rel"] < 1e-3 and rep["contraction_holds"]


@pytest.mark.parametrize("argv", [
    ["sample", "--ckpt", "x.witc", "--out", "o"],                      # missing --class
    ["diagnose-variance", "--mixture", "two-point", "--t", "1.5", "--out", "v.json"],
    ["sample", "--ckpt", "x.witc", "--class", "0", "--num", "0", "--out", "o"],
    ["make-toy-data", "--classes", "2", "--size", "8", "--out", "d"],  # missing --per-class
    ["no-such-command"],
    [],
])
def test_usage_errors_exit_1_and_write_nothing(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert os.listdir(tmp_path) == []
    assert "error" in capsys.readouterr().err


def test_train_pixel_needs_exactly_one_waypoint_source(workspace, tmp_path):
    d = workspace
    assert run(["--quiet", "train-pixel", "--data", str(d / "data"), "--out", str(tmp_path / "x.witc")]) == 1
    assert not (tmp_path / "x.witc").exists()


def test_data_errors_exit_2(workspace, tmp_path):
    d = workspace
    bad = tmp_path / "bad.witc"
    bad.write_bytes((d / "px.witc").read_bytes()[:100])
    assert run(["--quiet", "sample", "--ckpt", str(bad), "--class", "0", "--out", str(tmp_path / "o")]) == 2
    cfg = tmp_path / "typo.cfg"
    cfg.write_text("batch_sise = 4\n")
    assert run(["--quiet", "train-waypoints", "--data", str(d / "data"), "--proj", str(d / "proj.witc"),
                "--config", str(cfg), "--out", str(tmp_path / "w.witc")]) == 2
    assert run(["--quiet", "sample", "--ckpt", str(d / "px.witc"), "--class", "7",
                "--out", str(tmp_path / "o2")]) == 2
    assert run(["--quiet", "pca-fit", "--data", str(tmp_path / "nowhere"), "--dim", "2",
                "--out", str(tmp_path / "p.witc")]) == 2


def test_nan_exits_3(workspace, tmp_path):
    ck = read_checkpoint(workspace / "px.witc")
    for name in ck.tensors:
        if name.startswith("ema/out_up"):
            ck.tensors[name] = np.full_like(ck.tensors[name], np.nan)
    write_checkpoint(tmp_path / "nan.witc", ck)
    assert run(["--quiet", "sample", "--ckpt", str(tmp_path / "nan.witc"), "--class", "0", "--steps", "2",
                "--out", str(tmp_path / "o")]) == 3


def test_sample_deterministic(workspace, tmp_path):
    args = ["--quiet", "sample", "--ckpt", str(workspace / "px.witc"), "--class", "2", "--num", "2",
            "--steps", "3", "--cfg-scale", "1.0", "--seed", "9", "--out"]
    assert run(args + [str(tmp_path / "a")]) == 0
    assert run(args + [str(tmp_path / "b")]) == 0
    for name in ("0000.png", "0001.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
