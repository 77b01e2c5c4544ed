import json

import numpy as np
import pytest
from PIL import Image

from internet.cli import main

TINY = """
image_size = 32
widths = 8, 8
feature_dim = 8
head_hidden = 8
head_groups = 2
n_iters = 3
gen_channels = 4
window_size = 2
gen_heads = 1, 1, 2, 2, 4
bottleneck_depth = 2
mlp_ratio = 2.0
batch_size = 2
rho = 4
backbone = standin
total_iters = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    assert main(["synth", "--out", str(root / "data"), "--n", "6", "--n-test", "3", "--size", "32"]) == 0
    assert main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.txt"),
                 "--override", "total_iters=10", "--out", str(root / "run")]) == 0
    return root


def test_synth_layout(workspace):
    a = sorted((workspace / "data" / "train" / "modality_a").iterdir())
    b = sorted((workspace / "data" / "train" / "modality_b").iterdir())
    assert len(a) == len(b) == 6 and [p.name for p in a] == [p.name for p in b]
    assert len(list((workspace / "data" / "test" / "modality_a").iterdir())) == 3


def test_train_log_and_override(workspace):
    log = (workspace / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 10
    assert (workspace / "run" / "final.ckpt").is_file()
    assert "total_iters = 10" in (workspace / "run" / "config.txt").read_text()


def test_train_first_loss_deterministic(workspace, tmp_path):
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.txt"),
                 "--override", "total_iters=1", "--out", str(tmp_path / "again")]) == 0
    first = json.loads((workspace / "run" / "train_log.jsonl").read_text().splitlines()[0])
    again = json.loads((tmp_path / "again" / "train_log.jsonl").read_text().splitlines()[0])
    assert first["loss"] == again["loss"]


def test_missing_dataset_root(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert str(tmp_path / "nope") in capsys.readouterr().err


def test_config_errors_exit_2(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--override", "bogus_key=1", "--out", str(tmp_path)])
    assert code == 2 and "bogus_key" in capsys.readouterr().err


def test_eval_reports(workspace, capsys):
    out = workspace / "eval"
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n"] == 3 and summary["pipeline"] == "internet"
    report = json.loads((out / "report.json").read_text())
    assert report["mace"] == pytest.approx(np.mean(report["ace"]))


def test_distill_then_eval_skips_transfer(workspace, capsys, caplog):
    assert main(["distill", "--data", str(workspace / "data"), "--teacher", str(workspace / "run" / "final.ckpt"),
                 "--override", "total_iters=3", "--out", str(workspace / "distill")]) == 0
    ckpt = workspace / "distill" / "student.ckpt"
    assert ckpt.is_file()
    caplog.clear()
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(ckpt),
                 "--out", str(workspace / "eval_s")]) == 0
    assert "skipping the transfer stage" in caplog.text
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["pipeline"] == "estimator-only"


def test_infer_prints_displacement_and_matrix(workspace, capsys):
    img = workspace / "data" / "test" / "modality_a" / "img00000.png"
    assert main(["infer", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--image-a", str(img), "--image-b", str(img)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines[1].split()) == 8
    assert lines[2] == "homography:" and len(lines) == 6
    assert float(lines[5].split()[2]) == 1.0


def test_infer_wrong_size(workspace, tmp_path, capsys):
    Image.fromarray(np.zeros((20, 20, 3), dtype=np.uint8)).save(tmp_path / "x.png")
    code = main(["infer", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--image-a", str(tmp_path / "x.png"), "--image-b", str(tmp_path / "x.png")])
    assert code == 2


def test_overlay(workspace):
    out = workspace / "ov.png"
    assert main(["overlay", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--index", "1", "--out", str(out)]) == 0
    arr = np.asarray(Image.open(out))
    assert arr.shape == (32, 32, 3)
    assert ((arr == [255, 0, 0]).all(-1)).any()


def test_bad_checkpoint_exit_6(workspace, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    assert main(["eval", "--data", str(workspace / "data"), "--checkpoint", str(tmp_path / "bad.ckpt")]) == 6
