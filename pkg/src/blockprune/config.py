"""Run configuration files (JSON), validated before any work starts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema

from .data import TASK_KINDS, TaskSpec
from .errors import BlockPruneError, ConfigError
from .model import ModelConfig
from .pruning import METHODS
from .trainer import PruneSchedule, TrainRun

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "d_ff": {"type": "integer", "minimum": 1},
                "n_layers": {"type": "integer", "minimum": 1},
                "vocab_size": {"type": "integer", "minimum": 3},
                "max_len": {"type": "integer", "minimum": 8},
                "n_classes": {"type": "integer", "minimum": 2},
                "activation": {"enum": ["gelu", "relu"]},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(TASK_KINDS)},
                "train_size": {"type": "integer", "minimum": 1},
                "dev_size": {"type": "integer", "minimum": 1},
                "seed": _int,
                "seq_len": {"type": "integer", "minimum": 8},
                "vocab_size": {"type": "integer", "minimum": 3},
                "positive_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "path": {"type": ["string", "null"]},
                "dev_path": {"type": ["string", "null"]},
            },
        },
        "method": {"enum": sorted(METHODS) + ["Block", "Hybrid", "Hybrid NT", "Struct", "Hybrid Filled",
                                              "Hybrid Filled LT"]},
        "block_size": {"type": ["integer", "null"], "enum": [None, 1, 4, 8, 16, 32]},
        "att_block": {"type": "integer", "enum": [1, 4, 8, 16, 32]},
        "tied_heads": {"type": "boolean"},
        "teacher_epochs": _int,
        "large_teacher_epochs": _int,
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": _num, "score_lr": _num, "beta1": _num, "beta2": _num, "eps": _num,
                "weight_decay": _num, "batch_size": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "log_every": _int,
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "total_epochs": _int,
                "warmup_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "ramp_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "cooldown_frac": {"type": "number", "minimum": 0, "maximum": 1},
                "lam_end": {"type": "number", "minimum": 0},
            },
        },
        "lambda_sweep": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "lambda_center": {"type": ["number", "null"], "minimum": 0},
        "lambda_multipliers": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "block_sizes": {"type": ["array", "null"], "items": {"enum": [4, 8, 16, 32]}},
        "seeds": {"type": "array", "items": _int, "minItems": 1},
        "fill_steps": _int,
        "calibration_epochs": _int,
        "target_density": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "output_dir": {"type": "string"},
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch": {"type": "integer", "minimum": 1},
                "warmup": _int,
                "reps": {"type": "integer", "minimum": 1},
                "threads": {"type": "integer", "minimum": 1},
                "seq_len": {"type": ["integer", "null"], "minimum": 1},
            },
        },
    },
}


@dataclass
class BenchSettings:
    batch: int = 128
    warmup: int = 5
    reps: int = 31
    threads: int = 1
    seq_len: int | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    method: str = "hybrid"
    block_size: int | None = None
    att_block: int = 32
    tied_heads: bool = True
    teacher_epochs: int = 3
    large_teacher_epochs: int = 3
    optimizer: dict = field(default_factory=dict)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    lambda_sweep: list | None = None
    lambda_center: float | None = None
    lambda_multipliers: list = field(default_factory=lambda: list(DEFAULT_MULTIPLIERS))
    block_sizes: list | None = None
    seeds: list = field(default_factory=lambda: [0])
    fill_steps: int = 0
    calibration_epochs: int = 2
    target_density: float = 0.3
    output_dir: str = "out"
    bench: BenchSettings = field(default_factory=BenchSettings)

    def method_key(self):
        return self.method.lower().replace(" ", "_").replace("-", "_")

    def train_run(self, seed=0, lam_end=None, block_size=None, method=None):
        """TrainRun for one pipeline point."""
        from .pruning import method_teacher
        m = method or self.method_key()
        sched = PruneSchedule(**{**self.schedule.__dict__,
                                 **({"lam_end": lam_end} if lam_end is not None else {})})
        opt = dict(self.optimizer)
        return TrainRun(method=m, teacher=method_teacher(m), seed=seed, schedule=sched,
                        block_size=block_size if block_size is not None else self.block_size,
                        att_block=self.att_block, tied_heads=self.tied_heads, **opt)

    def dense_run(self, seed=0):
        opt = {k: v for k, v in self.optimizer.items() if k not in ("alpha", "temperature", "score_lr")}
        return TrainRun(method="hybrid", teacher=None, alpha=1.0, seed=seed, **opt)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = {k: getattr(v, k) for k in v.__dataclass_fields__}
                if f.name == "model":
                    v.pop("layer_heads", None)
                    v.pop("layer_ffn", None)
            out[f.name] = v
        return out


def _check_geometry(cfg):
    """Square blocks must tile every prunable matrix exactly."""
    from .pruning import method_patterns
    m = cfg.model
    sizes = [cfg.block_size] + list(cfg.block_sizes or [])
    for bs in sizes:
        for p in method_patterns(cfg.method_key(), bs, cfg.att_block, cfg.tied_heads):
            if p.kind == "square" and (m.d_model % p.size or m.d_ff % p.size):
                raise ConfigError(f"block size {p.size} does not divide d_model={m.d_model} / d_ff={m.d_ff}")


def parse_config(obj):
    try:
        jsonschema.validate(obj, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    kw = dict(obj)
    try:
        if "model" in kw:
            kw["model"] = ModelConfig(**kw["model"])
        if "task" in kw:
            kw["task"] = TaskSpec(**kw["task"])
        if "schedule" in kw:
            kw["schedule"] = PruneSchedule(**kw["schedule"])
        if "bench" in kw:
            kw["bench"] = BenchSettings(**kw["bench"])
        cfg = RunConfig(**kw)
        if cfg.task.seq_len > cfg.model.max_len:
            raise ConfigError("task.seq_len exceeds model.max_len")
        cfg.train_run()  # method / teacher consistency
        _check_geometry(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError, BlockPruneError) as exc:
        raise ConfigError(f"config invalid: {exc}") from None
    return cfg


def load_config(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_config(obj)
