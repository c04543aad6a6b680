"""Command-line entry point: ``blockprune <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 run error, 3 equivalence failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import bench, checkpoint
from .compactor import CompactPlan, compact, hybrid_fill, plan, rewind, verify_equivalence
from .config import RunConfig, load_config
from .data import load_task
from .errors import BlockPruneError, EquivalenceError
from .model import linear_param_census
from .pruning import density_report
from .quantizer import quantize_model
from .trainer import evaluate, fine_prune, train_dense, write_history

log = logging.getLogger("blockprune")

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_EQUIV = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the first configured seed")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--checked", action="store_true", help="fail on non-finite values")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="blockprune", description="Block movement pruning for small encoders.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("teacher-train", parents=[common], help="train the dense teacher(s)")
    p.add_argument("--large", action="store_true", help="also train the enlarged teacher")

    p = sub.add_parser("prune", parents=[common], help="fine-prune from the dense teacher")
    p.add_argument("--teacher", help="teacher checkpoint (default: OUT/teacher, trained if absent)")
    p.add_argument("--lam", type=float, help="final penalty weight")
    p.add_argument("--block-size", type=int)
    p.add_argument("--method")

    p = sub.add_parser("compact", parents=[common], help="crop dims and heads, verify equivalence")
    p.add_argument("--ckpt", help="masked checkpoint (default: OUT/pruned)")
    p.add_argument("--drop-head", action="append", default=[], metavar="LAYER:HEAD",
                   help="also remove this head (verification then normally fails)")

    p = sub.add_parser("fill", parents=[common], help="compact, refill reclaimed zeros and fine-tune")
    p.add_argument("--ckpt", help="masked checkpoint (default: OUT/pruned)")
    p.add_argument("--teacher")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("rewind", parents=[common], help="re-prune with surviving heads protected")
    p.add_argument("--ckpt", help="first pruned checkpoint (default: OUT/pruned)")
    p.add_argument("--teacher")
    p.add_argument("--lam", type=float)

    p = sub.add_parser("quantize", parents=[common], help="int8 per-row weight quantization")
    p.add_argument("--ckpt", help="checkpoint (default: OUT/compact)")

    p = sub.add_parser("eval", parents=[common], help="accuracy and census of a checkpoint")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("bench", parents=[common], help="latency against the dense baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--baseline", help="dense checkpoint (default: OUT/teacher)")

    sub.add_parser("sweep", parents=[common], help="lambda or block-size sweep")

    p = sub.add_parser("report", parents=[common], help="plot-ready CSVs from sweep results")
    p.add_argument("--results", help="results directory (default: OUT)")
    return parser


# -- helpers ------------------------------------------------------------------

def _need_config(args, parser):
    if not args.config:
        parser.print_usage(sys.stderr)
        raise UsageError(f"{args.command} requires --config")
    return load_config(args.config)


def _out(args, cfg=None):
    out = Path(args.out or (cfg.output_dir if cfg is not None else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.seeds[0]


def _emit(obj, path=None):
    text = json.dumps(bench._jsonable(obj), indent=2, sort_keys=True)
    print(text)
    if path is not None:
        checkpoint.write_json(path, bench._jsonable(obj))


def _load_or_train_teacher(args, cfg, out, train, seed, large=False):
    name = "teacher_large" if large else "teacher"
    given = getattr(args, "teacher", None) if not large else None
    path = Path(given) if given else out / name
    if (path / "config.json").exists():
        return checkpoint.load(path)[0]
    if given:
        raise BlockPruneError(f"teacher checkpoint not found: {path}")
    model_cfg = cfg.model.large() if large else cfg.model
    epochs = cfg.large_teacher_epochs if large else cfg.teacher_epochs
    s = seed + 1000 if large else seed
    model, hist = train_dense(model_cfg, train, epochs, seed=s, run=cfg.dense_run(s))
    write_history(hist, out / f"{name}_history.csv")
    checkpoint.save(model, path, extra={"role": name, "seed": s})
    return model


def _teacher_for(run, args, cfg, out, train, seed):
    if run.teacher == "large":
        return _load_or_train_teacher(args, cfg, out, train, seed, large=True)
    if run.teacher == "base":
        return _load_or_train_teacher(args, cfg, out, train, seed)
    return None


def _metrics(model, dev):
    census = linear_param_census(model)
    m = evaluate(model, dev)
    m.update(density=census["nonzero"] / census["dense_total"], linear_params=census["total"],
             nonzero=census["nonzero"], dense_total=census["dense_total"])
    if model.scores:
        m["head_compression"] = density_report(model)["head_compression"]
    return m


def _parse_drop(specs):
    out = []
    for s in specs:
        try:
            layer, head = s.split(":")
            out.append((int(layer), int(head)))
        except ValueError:
            raise UsageError(f"--drop-head expects LAYER:HEAD, got {s!r}") from None
    return out


# -- subcommands -------------------------------------------------------------

def cmd_teacher_train(args, cfg):
    out = _out(args, cfg)
    train, dev = load_task(cfg.task)
    seed = _seed(args, cfg)
    base = _load_or_train_teacher(args, cfg, out, train, seed)
    res = {"teacher": evaluate(base, dev)}
    if args.large or cfg.method_key().endswith("_lt"):
        res["teacher_large"] = evaluate(_load_or_train_teacher(args, cfg, out, train, seed, large=True), dev)
    _emit(res)


def cmd_prune(args, cfg):
    out = _out(args, cfg)
    train, dev = load_task(cfg.task)
    seed = _seed(args, cfg)
    base = _load_or_train_teacher(args, cfg, out, train, seed)
    run = cfg.train_run(seed=seed, lam_end=args.lam, block_size=args.block_size, method=args.method)
    teacher = _teacher_for(run, args, cfg, out, train, seed)
    res = fine_prune(run, base, train, teacher)
    write_history(res.history, out / "history.csv")
    metrics = _metrics(res.model, dev)
    checkpoint.save(res.model, out / "pruned", metrics=metrics,
                    extra={"run": bench._jsonable(run.to_dict()), "task": cfg.task.to_dict()})
    _emit(metrics)


def cmd_compact(args, cfg):
    out = _out(args, cfg)
    src = Path(args.ckpt) if args.ckpt else out / "pruned"
    masked, meta = checkpoint.load(src)
    p = plan(masked)
    drops = _parse_drop(args.drop_head)
    if drops:
        heads = [h.copy() for h in p.kept_heads]
        for layer, head in drops:
            if not 0 <= layer < len(heads):
                raise UsageError(f"--drop-head: no layer {layer}")
            heads[layer] = heads[layer][heads[layer] != head]
        p = CompactPlan(p.kept_dims, heads)
    small = compact(masked, p)
    dev_max = verify_equivalence(masked, small, raise_on_fail=False)
    report = {"max_logit_deviation": dev_max, "bound": 1e-4,
              "layer_heads": small.config.layer_heads, "layer_ffn": small.config.layer_ffn,
              **linear_param_census(small)}
    if dev_max > 1e-4:
        report.pop("per_family", None)
        _emit(report)
        raise EquivalenceError(dev_max, 1e-4)
    metrics = dict(meta.get("metrics", {}))
    metrics.update(max_logit_deviation=dev_max, linear_params=report["total"])
    checkpoint.save(small, out / "compact", metrics=metrics, extra={"source": str(src)})
    report.pop("per_family", None)
    _emit(report)


def cmd_fill(args, cfg):
    out = _out(args, cfg)
    train, dev = load_task(cfg.task)
    seed = _seed(args, cfg)
    masked, _ = checkpoint.load(Path(args.ckpt) if args.ckpt else out / "pruned")
    run = cfg.train_run(seed=seed, method="hybrid_filled")
    teacher = _teacher_for(run, args, cfg, out, train, seed)
    p = plan(masked)
    steps = cfg.fill_steps if args.steps is None else args.steps
    unfilled = compact(masked, p)
    small, filled = hybrid_fill(masked, p, ad.make_rng(seed, 21), steps, dataset=train, teacher=teacher, run=run)
    n_filled = int(sum(v.sum() for layer in filled for v in layer.values()))
    metrics = _metrics(small, dev)
    metrics.update(filled_positions=n_filled, unfilled_accuracy=evaluate(unfilled, dev)["accuracy"], steps=steps)
    checkpoint.save(small, out / "filled", metrics=metrics)
    _emit(metrics)


def cmd_rewind(args, cfg):
    out = _out(args, cfg)
    train, dev = load_task(cfg.task)
    seed = _seed(args, cfg)
    first, _ = checkpoint.load(Path(args.ckpt) if args.ckpt else out / "pruned")
    base = _load_or_train_teacher(args, cfg, out, train, seed)
    run = cfg.train_run(seed=seed, lam_end=args.lam)
    teacher = _teacher_for(run, args, cfg, out, train, seed)
    prot = rewind(first)
    res = fine_prune(run, base, train, teacher, protection=prot)
    write_history(res.history, out / "rewind_history.csv")
    metrics = _metrics(res.model, dev)
    metrics["protected_heads"] = prot.count()
    checkpoint.save(res.model, out / "rewound", metrics=metrics)
    _emit(metrics)


def cmd_quantize(args, cfg):
    out = _out(args, cfg)
    src = Path(args.ckpt) if args.ckpt else out / "compact"
    model, _ = checkpoint.load(src)
    q = quantize_model(model)
    rep = dict(q.report)
    if cfg is not None:
        _, dev = load_task(cfg.task)
        rep["float_accuracy"] = evaluate(model, dev)["accuracy"]
        rep["quant_accuracy"] = evaluate(q.model, dev)["accuracy"]
    checkpoint.save(q.model, out / "quantized", metrics=rep, quant=q.tensors, extra={"source": str(src)})
    _emit(rep)


def cmd_eval(args, cfg):
    model, _ = checkpoint.load(args.ckpt)
    if cfg is None:
        raise UsageError("eval requires --config (for the task)")
    _, dev = load_task(cfg.task)
    metrics = _metrics(model, dev)
    _emit(metrics, Path(args.out) / "eval.json" if args.out else None)


def cmd_bench(args, cfg):
    cfg = cfg or RunConfig()
    out = _out(args, cfg)
    cand, _ = checkpoint.load(args.ckpt)
    base, _ = checkpoint.load(Path(args.baseline) if args.baseline else out / "teacher")
    b = cfg.bench
    dense_ms, ms, speed = bench.compare_latency(base, cand, b.batch, b.warmup, b.reps,
                                                seq_len=b.seq_len or cfg.task.seq_len, threads=args.threads)
    census = linear_param_census(cand)
    _emit({"dense_latency_ms": dense_ms, "latency_ms": ms, "speedup": speed, "batch": b.batch,
           "reps": b.reps, "threads": args.threads, "linear_params": census["total"],
           "density": census["nonzero"] / census["dense_total"]}, out / "bench.json")


def cmd_sweep(args, cfg):
    out = _out(args, cfg)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    results = bench.sweep(cfg, out)
    failed = [r for r in results if r.error]
    _emit({"points": len(results), "failed": len(failed), "csv": str(out / "tradeoff.csv")})


def cmd_report(args, cfg):
    results = args.results or args.out
    if not results:
        raise UsageError("report requires --results or --out")
    print(bench.report(results), end="")


COMMANDS = {
    "teacher-train": (cmd_teacher_train, True),
    "prune": (cmd_prune, True),
    "compact": (cmd_compact, False),
    "fill": (cmd_fill, True),
    "rewind": (cmd_rewind, True),
    "quantize": (cmd_quantize, False),
    "eval": (cmd_eval, False),
    "bench": (cmd_bench, False),
    "sweep": (cmd_sweep, True),
    "report": (cmd_report, False),
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, needs_config = COMMANDS[args.command]
    sub = parser._subparsers._group_actions[0].choices[args.command]
    mode = ad.check_mode(np.float32, True) if args.checked else contextlib.nullcontext()
    try:
        cfg = _need_config(args, sub) if needs_config else (load_config(args.config) if args.config else None)
        with mode, threadpool_limits(args.threads):
            fn(args, cfg)
    except UsageError as exc:
        print(f"blockprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EquivalenceError as exc:
        print(f"blockprune {args.command}: {exc}", file=sys.stderr)
        return EXIT_EQUIV
    except (BlockPruneError, OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"blockprune {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
