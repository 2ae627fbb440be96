import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from twinspeech import checkpoint as ckpt_io
from twinspeech import config
from twinspeech.cli import main
from twinspeech.config import RunConfig
from twinspeech.data import DatasetManifest

TINY_TOML = """
[model]
conv_widths = [2, 3]
projector_hidden = 6
latent_dim = 8

[train]
epochs = 1
batch_size = 4

[eval]
epochs = 2
batch_size = 4
fractions = [0.5, 1.0]
seeds = [0]
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return str(path)


@pytest.fixture()
def featurized(small_fixture, tmp_path):
    out = tmp_path / "feats"
    assert main(["featurize", "--manifest", small_fixture, "--out-dir", str(out)]) == 0
    return str(out / "index.csv")


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "twinspeech.cli", *args], capture_output=True, text=True)


def test_featurize_idempotent(small_fixture, tmp_path, capsys):
    out = str(tmp_path / "f")
    assert main(["featurize", "--manifest", small_fixture, "--out-dir", out]) == 0
    first = capsys.readouterr().out
    assert "16 written" in first
    stamp = {p: os.path.getmtime(os.path.join(out, p)) for p in os.listdir(out) if p.endswith(".feat")}
    assert main(["featurize", "--manifest", small_fixture, "--out-dir", out]) == 0
    assert "0 written, 16 up to date" in capsys.readouterr().out
    assert stamp == {p: os.path.getmtime(os.path.join(out, p)) for p in stamp}
    index = DatasetManifest.read(os.path.join(out, "index.csv"))
    assert len(index) == 16 and index.role == "downstream"


def test_featurize_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("path,label,split\n")
    assert main(["featurize", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "index.csv").read_text().strip() == "path,label,split"


def test_featurize_corrupt_wav(tmp_path, capsys):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    (tmp_path / "m.csv").write_text("path,label,split\nbad.wav,a,train\n")
    assert main(["featurize", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "bad.wav" in err


def test_missing_manifest_is_usage_error(tmp_path):
    assert main(["pretrain", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "x")]) == 1


def test_pretrain_deterministic_and_logged(featurized, tiny_config, tmp_path, capsys):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    corr = str(tmp_path / "c.csv")
    assert main(["pretrain", "--manifest", featurized, "--out", a, "--config", tiny_config,
                 "--dump-corr", corr]) == 0
    out = capsys.readouterr().out
    assert "final loss: total=" in out and "invariance=" in out and "redundancy=" in out
    assert main(["pretrain", "--manifest", featurized, "--out", b, "--config", tiny_config]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    rows = [json.loads(l) for l in open(a + ".log.jsonl")]
    assert rows and set(rows[0]) == {"epoch", "step", "invariance", "redundancy", "total", "wall_ms"}
    assert np.loadtxt(corr, delimiter=",").shape == (8, 8)


def test_finetune_eval_grid(featurized, tiny_config, tmp_path, capsys):
    ck = str(tmp_path / "up.ckpt")
    assert main(["pretrain", "--manifest", featurized, "--out", ck, "--config", tiny_config]) == 0
    model = str(tmp_path / "ft.ckpt")
    capsys.readouterr()
    assert main(["finetune", "--ckpt", ck, "--manifest", featurized, "--config", tiny_config,
                 "--out", model]) == 0
    ft = json.loads(capsys.readouterr().out)
    assert ft["n_train"] == 12 and 0 <= ft["top1"] <= 100
    assert main(["eval", "--model", model, "--manifest", featurized, "--config", tiny_config]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["top1"] == ft["top1"] and ev["n_test"] == 4
    stem = str(tmp_path / "report")
    assert main(["grid", "--ckpt", ck, "--manifest", featurized, "--config", tiny_config,
                 "--fractions", "1.0", "--seeds", "1", "--out", stem]) == 0
    csv_rows = open(stem + ".csv").read().strip().splitlines()
    assert len(csv_rows) == 1 + 2          # one pretrained cell, one baseline cell
    md = open(stem + ".md").read()
    assert sum(l.startswith("| 100 ") for l in md.splitlines()) == 1


def test_grid_failed_cell_exit(featurized, tiny_config, tmp_path):
    ck = str(tmp_path / "up.ckpt")
    assert main(["pretrain", "--manifest", featurized, "--out", ck, "--config", tiny_config]) == 0
    stem = str(tmp_path / "r")
    # a 4-class downstream set where one class has no training items
    index = DatasetManifest.read(featurized)
    kept = tuple(e for e in index.entries if not (e.label == "tone" and e.split == "train"))
    DatasetManifest(kept, index.classes, "downstream", index.base_dir).write(str(tmp_path / "holey.csv"))
    for e in kept:
        src = os.path.join(index.base_dir, e.path)
        os.symlink(src, tmp_path / e.path)
    code = main(["grid", "--ckpt", ck, "--manifest", str(tmp_path / "holey.csv"), "--config", tiny_config,
                 "--fractions", "1.0", "--seeds", "1", "--out", stem])
    assert code == 1
    assert "SubsampleError" in open(stem + ".md").read()


def test_gradcheck_defaults(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "[bt]" in out and "[mbt]" in out


def test_gradcheck_single_variant(capsys):
    assert main(["gradcheck", "--variant", "bt", "--skip-model"]) == 0
    out = capsys.readouterr().out
    assert "[bt]" in out and "[mbt]" not in out


def test_gradcheck_m1_usage():
    assert main(["gradcheck", "--m", "1"]) == 1


def test_usage_errors_exit_1():
    r = run_cli("gradcheck", "--variant", "xx")
    assert r.returncode == 1
    assert run_cli().returncode == 1


def test_config_dump_fixed_point(tmp_path, capsys):
    assert main(["config", "dump"]) == 0
    text = capsys.readouterr().out
    (tmp_path / "c.toml").write_text(text)
    assert main(["config", "dump", "--config", str(tmp_path / "c.toml")]) == 0
    assert capsys.readouterr().out == text
    assert config.loads(text) == RunConfig()


def test_config_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TWIN_SEED", "5")
    assert main(["config", "dump"]) == 0
    assert config.loads(capsys.readouterr().out).train.seed == 5


def test_numeric_failure_exit_2(featurized, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY_TOML.replace("[train]\n", "[train]\nlr = 1e300\ngrad_clip = 0.0\n"))
    code = main(["pretrain", "--manifest", featurized, "--out", str(tmp_path / "x"), "--config", str(bad),
                 "--epochs", "3"])
    assert code == 2


def test_make_fixture(tmp_path):
    assert main(["make-fixture", "--out-dir", str(tmp_path), "--per-class", "2", "--test-per-class", "1"]) == 0
    m = DatasetManifest.read(tmp_path / "manifest.csv")
    assert len(m) == 8 and sorted(m.classes) == ["chirp_down", "chirp_up", "noise_band", "tone"]


@pytest.mark.slow
def test_one_epoch_smoke_on_full_fixture(tmp_path):
    assert main(["make-fixture", "--out-dir", str(tmp_path / "wav")]) == 0
    assert main(["featurize", "--manifest", str(tmp_path / "wav" / "manifest.csv"),
                 "--out-dir", str(tmp_path / "feat")]) == 0
    desk = tmp_path / "desk.toml"
    desk.write_text(config.dumps(RunConfig.desk()))
    t0 = time.perf_counter()
    assert main(["pretrain", "--manifest", str(tmp_path / "feat" / "index.csv"), "--out",
                 str(tmp_path / "a.ckpt"), "--config", str(desk), "--epochs", "1"]) == 0
    assert time.perf_counter() - t0 < 60
    assert ckpt_io.load(tmp_path / "a.ckpt").epoch == 1
