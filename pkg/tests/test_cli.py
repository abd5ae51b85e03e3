import csv

import numpy as np
import pytest

import lwisp.gradcheck as gc
from lwisp.cli import build_parser, build_config, config_from_items, main, read_config_file
from lwisp.data import read_rgb

TINY_FLAGS = ["--widths", "4,8,8,16", "--head-width", "8", "--batch", "4"]


def test_config_file_and_flag_override(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nlr = 0.002\nwidths = 8,8,8,8\nuse_fgam = false\nepochs=4\n", encoding="utf-8")
    assert read_config_file(p)["lr"] == "0.002"
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(p), "--lr", "0.01"])
    c = build_config(args)
    assert c.lr == 0.01 and c.epochs == 4
    assert c.model.widths == (8, 8, 8, 8) and c.model.use_fgam is False


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lr 0.1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="key=value"):
        read_config_file(bad)
    with pytest.raises(ValueError, match="unknown config key"):
        config_from_items({"learning_rate": "1"})
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "none.cfg")


def test_flags_mirror_config():
    args = build_parser().parse_args(
        ["train", "--data", "d", "--out", "o", "--alpha", "0.1", "--beta", "0.2", "--gamma", "0.3",
         "--seed", "5", "--taps", "up3,up4", "--no-fgam", "--epochs", "2"]
    )
    c = build_config(args)
    assert (c.alpha, c.beta, c.gamma, c.seed, c.model.seed, c.epochs) == (0.1, 0.2, 0.3, 5, 5, 2)
    assert c.taps == "up3,up4" and not c.model.use_fgam


def test_train_eval_infer_pipeline(synth_root, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-teacher", "--data", str(synth_root), "--out", str(out), "--epochs", "1", *TINY_FLAGS]) == 0
    assert main([
        "train", "--data", str(synth_root), "--out", str(out), "--epochs", "2",
        "--teacher", str(out / "teacher.ckpt"), *TINY_FLAGS,
    ]) == 0
    for name in ("student.ckpt", "student_report.csv", "student_summary.txt", "student_curves.png", "teacher_report.csv"):
        assert (out / name).is_file()
    with open(out / "student_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["epoch"] for r in rows] == ["1", "2"] and rows[0]["val_psnr"]

    ev = tmp_path / "eval"
    assert main(["eval", "--ckpt", str(out / "student.ckpt"), "--data", str(synth_root), "--out", str(ev)]) == 0
    with open(ev / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows] == ["val_0000", "val_0001", "mean"]
    assert (ev / "metrics_psnr.png").is_file()

    raw = synth_root / "val" / "raw" / "val_0000.png"
    png = tmp_path / "out.png"
    assert main(["infer", "--ckpt", str(out / "student.ckpt"), "--raw", str(raw), "--out", str(png)]) == 0
    assert read_rgb(png).shape == (3, 64, 64)
    capsys.readouterr()


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    code = main(["infer", "--ckpt", str(tmp_path / "gone.ckpt"), "--raw", "x.png", "--out", "y.png"])
    assert code != 0
    assert "gone.ckpt" in capsys.readouterr().err


def test_missing_data_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) != 0
    assert "nowhere" in capsys.readouterr().err


def test_gradcheck_exit_codes(monkeypatch, tmp_path, capsys):
    assert main(["gradcheck", "--scope", "ops", "--seeds", "1", "--out", str(tmp_path / "g.csv")]) == 0
    assert "0 failure(s)" in capsys.readouterr().out
    monkeypatch.setitem(gc.SUITES, "ops", lambda seed: [gc.CheckResult("broken", 1.0, 1, 0)])
    assert main(["gradcheck", "--scope", "ops", "--seeds", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_stats_table(tmp_path, capsys):
    assert main(["stats", "--out", str(tmp_path / "s.csv")]) == 0
    text = capsys.readouterr().out
    assert "flops_224x224" in text and "flops_960x960" in text
    with open(tmp_path / "s.csv") as fh:
        rows = {r["model"]: r for r in csv.DictReader(fh)}
    assert int(rows["student w/o FGAM"]["params"]) < int(rows["student"]["params"])
    assert rows["student"]["convs_trunk"] == "24"


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "2", "--val-count", "1", "--size", "32"]) == 0
    assert len(list((tmp_path / "d" / "train" / "raw").glob("*.png"))) == 2
    capsys.readouterr()
