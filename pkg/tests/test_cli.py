import csv
import json

import pytest

from blockprune import checkpoint
from blockprune.cli import main

CONFIG = {
    "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1, "max_len": 16, "dropout": 0.0},
    "task": {"kind": "synth:needle", "train_size": 128, "dev_size": 32, "seq_len": 16},
    "method": "hybrid",
    "att_block": 8,
    "teacher_epochs": 1,
    "large_teacher_epochs": 1,
    "optimizer": {"lr": 2e-3, "log_every": 2},
    "schedule": {"total_epochs": 2, "lam_end": 0.01},
    "lambda_sweep": [0.0, 0.01],
    "fill_steps": 2,
    "bench": {"batch": 16, "warmup": 1, "reps": 3},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(CONFIG))
    out = root / "out"
    codes = {}
    for cmd in ("teacher-train", "prune", "compact", "quantize"):
        codes[cmd] = main([cmd, "--config", str(cfg), "--out", str(out)])
    return cfg, out, codes


def test_happy_path(pipeline):
    cfg, out, codes = pipeline
    assert all(c == 0 for c in codes.values()), codes
    for d in ("teacher", "pruned", "compact", "quantized"):
        assert (out / d / "config.json").exists() and (out / d / "tensors.bin").exists()
    rows = list(csv.DictReader((out / "history.csv").open()))
    assert rows and set(rows[0]) == {"step", "lambda", "density", "head_compression", "accuracy", "loss"}


def test_eval_reproduces_stored_metrics(pipeline, capsys):
    cfg, out, _ = pipeline
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--ckpt", str(out / "pruned")]) == 0
    got = json.loads(capsys.readouterr().out)
    stored = json.loads((out / "pruned" / "config.json").read_text())["metrics"]
    assert got["accuracy"] == stored["accuracy"] and got["density"] == stored["density"]


def test_fill_and_rewind(pipeline, capsys):
    cfg, out, _ = pipeline
    assert main(["fill", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["rewind", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "filled" / "config.json").exists() and (out / "rewound" / "config.json").exists()


def test_bench(pipeline, capsys):
    cfg, out, _ = pipeline
    capsys.readouterr()
    assert main(["bench", "--config", str(cfg), "--out", str(out), "--ckpt", str(out / "compact")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["speedup"] > 0 and res["batch"] == 16


def test_drop_nonempty_head_exits_3(pipeline):
    cfg, out, _ = pipeline
    neg = out.parent / "neg"
    code = main(["compact", "--out", str(neg), "--ckpt", str(out / "teacher"), "--drop-head", "0:0"])
    assert code == 3
    assert not (neg / "compact").exists()


def test_prune_without_config_is_usage_error(capsys):
    assert main(["prune"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 1


def test_no_subcommand():
    assert main([]) == 1


def test_bad_config_is_run_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"method": "magic"}))
    assert main(["prune", "--config", str(p)]) == 2
    assert "method" in capsys.readouterr().err


def test_missing_checkpoint_is_run_error(tmp_path):
    assert main(["compact", "--out", str(tmp_path), "--ckpt", str(tmp_path / "nothing")]) == 2


def test_sweep_and_report(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(CONFIG))
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "tradeoff.csv").open()))
    assert len(rows) == 2
    assert [float(r["density"]) for r in rows] == sorted(float(r["density"]) for r in rows)
    assert float(rows[-1]["density"]) == 1.0  # the lambda = 0 point
    assert json.loads((out / "summary.json").read_text())["points"]
    assert main(["report", "--results", str(out)]) == 0
    assert (out / "accuracy_vs_speedup.csv").exists() and (out / "accuracy_vs_density.csv").exists()


def test_report_empty_dir(tmp_path):
    assert main(["report", "--results", str(tmp_path)]) == 2


def test_checked_flag(pipeline):
    cfg, out, _ = pipeline
    assert main(["eval", "--checked", "--config", str(cfg), "--ckpt", str(out / "compact")]) == 0
