import json

import pytest

from blockprune.config import RunConfig, load_config, parse_config
from blockprune.errors import ConfigError


def test_defaults():
    cfg = parse_config({})
    assert cfg.method == "hybrid" and cfg.bench.batch == 128 and cfg.lambda_multipliers == [0.25, 0.5, 1.0, 2.0, 4.0]


def test_full_document(tmp_path):
    doc = {
        "model": {"d_model": 64, "n_heads": 2, "d_ff": 128, "n_layers": 1, "max_len": 16},
        "task": {"kind": "synth:pairdup", "train_size": 100, "dev_size": 20, "seq_len": 16},
        "method": "Hybrid NT",
        "optimizer": {"lr": 1e-3, "alpha": 1.0},
        "schedule": {"total_epochs": 3, "lam_end": 0.01},
        "lambda_sweep": [0.001, 0.01],
        "seeds": [0, 1],
        "bench": {"reps": 5},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    cfg = load_config(path)
    run = cfg.train_run(seed=1, lam_end=0.5)
    assert run.teacher is None and run.method == "hybrid_nt"
    assert run.schedule.lam_end == 0.5 and cfg.schedule.lam_end == 0.01
    assert run.lr == 1e-3 and cfg.bench.reps == 5


@pytest.mark.parametrize("doc, where", [
    ({"method": "magic"}, "method"),
    ({"model": {"d_model": "big"}}, "model/d_model"),
    ({"unknown": 1}, "<root>"),
    ({"seeds": []}, "seeds"),
    ({"block_size": 3}, "block_size"),
    ({"task": {"kind": "synth:pairdup", "seq_len": 80}}, "max_len"),
    ({"model": {"d_model": 10, "n_heads": 3}}, "divisible"),
])
def test_rejections(doc, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(doc)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)


def test_to_dict_reparses():
    cfg = RunConfig()
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_dense_run_has_no_teacher():
    run = parse_config({"optimizer": {"alpha": 0.3, "score_lr": 0.1}}).dense_run(3)
    assert run.teacher is None and run.alpha == 1.0 and run.seed == 3


def test_indivisible_block_rejected():
    with pytest.raises(ConfigError, match="does not divide"):
        parse_config({"model": {"d_model": 16, "n_heads": 2, "d_ff": 32}, "method": "hybrid"})
