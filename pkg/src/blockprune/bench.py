"""Timing harness, end-to-end pipeline points, sweeps and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import checkpoint
from .compactor import compact, hybrid_fill, plan, verify_equivalence
from .data import load_task
from .errors import BlockPruneError
from .model import Encoder, linear_param_census
from .pruning import density_report
from .quantizer import quantize_model
from .trainer import evaluate, fine_prune, train_dense, write_history

log = logging.getLogger(__name__)

RESULT_FIELDS = ("method", "seed", "lam", "block_size", "density", "linear_params", "head_compression",
                 "accuracy", "dense_accuracy", "latency_ms", "dense_latency_ms", "speedup", "error")


@dataclass
class BenchResult:
    method: str
    lam: float
    block_size: int | None
    density: float
    linear_params: int
    head_compression: float
    accuracy: float
    latency_ms: float
    speedup: float
    seed: int = 0
    dense_accuracy: float | None = None
    dense_latency_ms: float | None = None
    error: str | None = None

    def to_row(self):
        return {k: getattr(self, k) for k in RESULT_FIELDS}


# -- timing -----------------------------------------------------------------

def _bench_ids(model, batch, seq_len, seed):
    L = seq_len or model.config.max_len
    return ad.make_rng(seed, 11).integers(3, model.config.vocab_size, (batch, L))


def time_inference(model, batch=128, warmup=5, reps=31, *, seq_len=None, seed=0, threads=1):
    """Median wall time (ms) of one eval-mode forward over a fixed batch."""
    ids = _bench_ids(model, batch, seq_len, seed)
    with threadpool_limits(threads):
        for _ in range(warmup):
            model.predict_logits(ids, batch)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model.predict_logits(ids, batch)
            times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def compare_latency(baseline, candidate, batch=128, warmup=5, reps=31, *, seq_len=None, seed=0, threads=1):
    """Time both models on identical data in one process, interleaving reps.

    Returns ``(baseline_ms, candidate_ms, speedup)``.
    """
    ids = _bench_ids(baseline, batch, seq_len, seed)
    tb, tc = [], []
    with threadpool_limits(threads):
        for _ in range(warmup):
            baseline.predict_logits(ids, batch)
            candidate.predict_logits(ids, batch)
        for _ in range(reps):
            t0 = time.perf_counter()
            baseline.predict_logits(ids, batch)
            t1 = time.perf_counter()
            candidate.predict_logits(ids, batch)
            t2 = time.perf_counter()
            tb.append(t1 - t0)
            tc.append(t2 - t1)
    b, c = 1000.0 * float(np.median(tb)), 1000.0 * float(np.median(tc))
    return b, c, b / c


# -- pipeline ---------------------------------------------------------------

@dataclass
class Teachers:
    base: Encoder
    large: Encoder | None = None
    base_accuracy: float = 0.0


def train_teachers(cfg, train, dev, seed, need_large=False):
    model_cfg = cfg.model
    base, _ = train_dense(model_cfg, train, cfg.teacher_epochs, seed=seed, run=cfg.dense_run(seed))
    large = None
    if need_large:
        large, _ = train_dense(model_cfg.large(), train, cfg.large_teacher_epochs, seed=seed + 1000,
                               run=cfg.dense_run(seed + 1000))
    return Teachers(base, large, evaluate(base, dev)["accuracy"])


@dataclass
class PointArtifacts:
    masked: Encoder
    compact: Encoder
    final: Encoder
    history: list = field(default_factory=list)
    deviation: float = 0.0


def run_point(cfg, teachers, train, dev, *, seed=0, lam=None, block_size=None, method=None, bench=True,
              dense_latency=None):
    """prune -> compact (verified) -> [fill] -> evaluate -> time."""
    run = cfg.train_run(seed=seed, lam_end=lam, block_size=block_size, method=method)
    teacher = {"base": teachers.base, "large": teachers.large}.get(run.teacher) if run.teacher else None
    res = fine_prune(run, teachers.base, train, teacher)
    masked = res.model
    rep = density_report(masked)
    p = plan(masked)
    small = compact(masked, p)
    dev_max = verify_equivalence(masked, small)
    final = small
    if run.method.startswith("hybrid_filled"):
        final, _ = hybrid_fill(masked, p, ad.make_rng(seed, 21), cfg.fill_steps, dataset=train,
                               teacher=teacher, run=run)
    census = linear_param_census(final)
    density = census["nonzero"] / census["dense_total"]
    acc = evaluate(final, dev)["accuracy"]
    lat = dlat = speed = float("nan")
    if bench:
        b = cfg.bench
        dlat, lat, speed = compare_latency(teachers.base, final, b.batch, b.warmup, b.reps,
                                           seq_len=b.seq_len or cfg.task.seq_len, seed=seed, threads=b.threads)
    result = BenchResult(method=run.method, lam=run.schedule.lam_end, block_size=run.block_size,
                         density=density, linear_params=census["total"],
                         head_compression=rep["head_compression"], accuracy=acc, latency_ms=lat,
                         speedup=speed, seed=seed, dense_accuracy=teachers.base_accuracy,
                         dense_latency_ms=dlat)
    return result, PointArtifacts(masked, small, final, res.history, dev_max)


def calibrate_lambda(cfg, teachers, train, seed=0, target=None, iters=6, lo=1e-6, hi=1.0):
    """Short-run geometric bisection for the penalty reaching ``target`` density."""
    target = cfg.target_density if target is None else target
    short = RunConfigView(cfg, total_epochs=cfg.calibration_epochs)
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        run = short.train_run(seed=seed, lam_end=mid)
        teacher = teachers.large if run.teacher == "large" else teachers.base
        res = fine_prune(run, teachers.base, train, teacher if run.teacher else None)
        d = density_report(res.model)["density"]
        log.info("calibration lambda=%.4g density=%.3f", mid, d)
        if d > target:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


class RunConfigView:
    """A RunConfig with the pruning epoch count overridden."""

    def __init__(self, cfg, total_epochs):
        self._cfg = cfg
        self._epochs = total_epochs

    def train_run(self, **kw):
        run = self._cfg.train_run(**kw)
        run.schedule.total_epochs = self._epochs
        return run


def sweep_points(cfg, lam_center=None):
    """(lambda, block_size) pairs for a sweep configuration."""
    if cfg.lambda_sweep:
        lams = list(cfg.lambda_sweep)
    else:
        center = lam_center if lam_center is not None else cfg.lambda_center
        if center is None:
            raise ValueError("sweep needs lambda_sweep, lambda_center or a calibration")
        lams = [center * m for m in cfg.lambda_multipliers]
    if cfg.block_sizes:
        if len(lams) != 1:
            raise ValueError("a block-size sweep runs at one fixed lambda")
        return [(lams[0], b) for b in cfg.block_sizes]
    return [(lam, None) for lam in lams]


def sweep(cfg, out_dir=None, *, save_checkpoints=False):
    """Run every sweep point for every seed; failures are recorded, not raised.

    Writes ``tradeoff.csv`` (sorted by density) and ``summary.json``.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev = load_task(cfg.task)
    results = []
    calibrated = None
    for seed in cfg.seeds:
        teachers = train_teachers(cfg, train, dev, seed, need_large=cfg.method_key().endswith("_lt"))
        if not cfg.lambda_sweep and cfg.lambda_center is None and calibrated is None:
            calibrated = calibrate_lambda(cfg, teachers, train, seed)
        for lam, bs in sweep_points(cfg, calibrated):
            try:
                r, art = run_point(cfg, teachers, train, dev, seed=seed, lam=lam, block_size=bs)
                if save_checkpoints:
                    tag = f"seed{seed}_lam{lam:.4g}" + (f"_b{bs}" if bs else "")
                    checkpoint.save(art.final, out / "checkpoints" / tag,
                                    metrics=asdict(r), extra={"task": cfg.task.to_dict()})
            except (BlockPruneError, ValueError, FloatingPointError) as exc:
                log.warning("sweep point lam=%s block=%s seed=%s failed: %s", lam, bs, seed, exc)
                r = BenchResult(cfg.method_key(), lam, bs, float("nan"), 0, float("nan"), float("nan"),
                                float("nan"), float("nan"), seed=seed,
                                error=f"{type(exc).__name__}: {exc}")
            results.append(r)
    write_results_csv(results, out / "tradeoff.csv")
    summary = {
        "config": cfg.to_dict(),
        "lambda_center": calibrated if calibrated is not None else cfg.lambda_center,
        "points": [asdict(r) for r in results],
    }
    checkpoint.write_json(out / "summary.json", _jsonable(summary))
    return results


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _density_key(r):
    return (math.inf if not math.isfinite(r.density) else r.density, r.seed)


def write_results_csv(results, path):
    rows = sorted(results, key=_density_key)
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.to_row())
    tmp.replace(path)


def read_results_csv(path):
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            def num(k, cast=float):
                v = row.get(k, "")
                return cast(v) if v not in ("", None) else None
            out.append(BenchResult(
                method=row["method"], lam=num("lam"), block_size=num("block_size", lambda v: int(float(v))),
                density=num("density"), linear_params=num("linear_params", lambda v: int(float(v))),
                head_compression=num("head_compression"), accuracy=num("accuracy"),
                latency_ms=num("latency_ms"), speedup=num("speedup"), seed=num("seed", int),
                dense_accuracy=num("dense_accuracy"), dense_latency_ms=num("dense_latency_ms"),
                error=row.get("error") or None))
    return out


def report(results_dir):
    """Plot-ready CSVs (one series per method, sorted by x) and a text summary."""
    results_dir = Path(results_dir)
    files = sorted(results_dir.rglob("tradeoff.csv"))
    results = [r for f in files for r in read_results_csv(f)]
    results = [r for r in results if not r.error]
    if not results:
        raise BlockPruneError(f"{results_dir}: no benchmark results found")
    for x, name in (("speedup", "accuracy_vs_speedup.csv"), ("density", "accuracy_vs_density.csv")):
        rows = sorted(results, key=lambda r: (r.method, getattr(r, x)))
        with (results_dir / name).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", x, "accuracy", "seed", "lam", "block_size"])
            for r in rows:
                w.writerow([r.method, getattr(r, x), r.accuracy, r.seed, r.lam, r.block_size])
    lines = [f"{'method':<18}{'lam':>10}{'block':>7}{'seed':>6}{'density':>9}{'params':>10}"
             f"{'heads x':>9}{'acc':>8}{'speedup':>9}"]
    for r in sorted(results, key=lambda r: (r.method, r.density)):
        lines.append(f"{r.method:<18}{r.lam:>10.4g}{(r.block_size or '-'):>7}{r.seed:>6}{r.density:>9.3f}"
                     f"{r.linear_params:>10d}{r.head_compression:>9.2f}{r.accuracy:>8.3f}{r.speedup:>9.2f}")
    text = "\n".join(lines) + "\n"
    (results_dir / "summary.txt").write_text(text)
    return text


def quantize_report(model, dev=None):
    q = quantize_model(model)
    rep = dict(q.report)
    if dev is not None:
        rep["float_accuracy"] = evaluate(model, dev)["accuracy"]
        rep["quant_accuracy"] = evaluate(q.model, dev)["accuracy"]
    return q, rep
