"""Dense teacher training and the fine-pruning loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import batches
from .errors import ContractError, RunError
from .model import Encoder
from .pruning import attach_method, density_report, method_teacher, reg_term

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("step", "lambda", "density", "head_compression", "accuracy", "loss")


@dataclass
class PruneSchedule:
    total_epochs: int = 10
    warmup_frac: float = 0.1
    ramp_frac: float = 0.5
    cooldown_frac: float = 0.2
    lam_end: float = 1.0

    def __post_init__(self):
        fr = (self.warmup_frac, self.ramp_frac, self.cooldown_frac)
        if min(fr) < 0 or sum(fr) > 1 + 1e-12:
            raise ContractError("schedule fractions must be >= 0 and sum to <= 1")
        if self.lam_end < 0:
            raise ContractError("lam_end must be >= 0")

    def bounds(self, total_steps):
        """(ramp start, ramp end, cooldown start) in steps."""
        w = int(round(self.warmup_frac * total_steps))
        r = int(round(self.ramp_frac * total_steps))
        c = total_steps - int(round(self.cooldown_frac * total_steps))
        return w, w + r, max(c, w + r)


def schedule_lambda(step, schedule, total_steps):
    """0 in warmup, linear ramp to ``lam_end``, then constant."""
    w, r_end, _ = schedule.bounds(total_steps)
    if step < w:
        return 0.0
    if step < r_end:
        return schedule.lam_end * (step - w) / (r_end - w)
    return schedule.lam_end


def scores_trainable(step, schedule, total_steps):
    """Scores move only while the penalty is active and before cool-down."""
    _, _, c = schedule.bounds(total_steps)
    return step < c and schedule_lambda(step, schedule, total_steps) > 0


@dataclass
class TrainRun:
    method: str = "hybrid"
    teacher: str | None = "base"  # None | "base" | "large"
    alpha: float = 0.5
    temperature: float = 2.0
    seed: int = 0
    lr: float = 5e-4
    score_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    block_size: int | None = None
    att_block: int = 32
    tied_heads: bool = True
    balance: bool = True
    log_every: int = 10
    schedule: PruneSchedule = field(default_factory=PruneSchedule)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = PruneSchedule(**self.schedule)
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        expected = method_teacher(self.method)
        if expected is None and self.teacher is not None:
            raise ContractError(f"method {self.method!r} trains without a teacher")

    @classmethod
    def for_method(cls, method, **kw):
        return cls(method=method, teacher=method_teacher(method), **kw)

    def to_dict(self):
        return asdict(self)


def combined_loss(logits, labels, teacher_logits=None, alpha=0.5, temperature=2.0, reg_value=None):
    """``alpha * CE + (1 - alpha) * KD + reg``; plain ``CE + reg`` without a teacher."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    ce = ad.cross_entropy(logits, labels)
    if teacher_logits is None or alpha == 1.0:
        loss = ce
    else:
        kd = ad.kl_distill(logits, teacher_logits, temperature)
        loss = ad.add(ad.scale(ce, alpha), ad.scale(kd, 1.0 - alpha))
    if reg_value is not None:
        loss = ad.add(loss, reg_value)
    return loss


def evaluate(model, dataset, batch_size=256):
    logits = model.predict_logits(dataset.ids, batch_size)
    ls = logits - logits.max(axis=1, keepdims=True)
    ls = ls - np.log(np.exp(ls).sum(axis=1, keepdims=True))
    loss = float(-ls[np.arange(len(dataset)), dataset.labels].mean())
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    return {"accuracy": acc, "loss": loss}


def _make_optimizer(model, run):
    groups = [ad.ParamGroup(model.parameters(), run.lr, run.weight_decay)]
    groups.append(ad.ParamGroup(model.score_parameters(), run.score_lr, 0.0))
    return ad.Adam(groups, run.beta1, run.beta2, run.eps)


def _steps_per_epoch(dataset, batch_size):
    return math.ceil(len(dataset) / batch_size)


def _train_loop(model, dataset, epochs, run, *, teacher=None, reg=None, schedule=None,
                protect=False, on_epoch=None, max_steps=None):
    """Shared step loop for dense training, fine-pruning and post-fill tuning.

    Batch order and dropout draw from two seeded streams so that runs from
    the same state and seed replay exactly.
    """
    data_rng = ad.make_rng(run.seed, 1)
    drop_rng = ad.make_rng(run.seed, 2)
    opt = _make_optimizer(model, run)
    total = epochs * _steps_per_epoch(dataset, run.batch_size)
    if max_steps is not None:
        total = min(total, max_steps)
        epochs = math.ceil(max_steps / _steps_per_epoch(dataset, run.batch_size))
    history = []
    step = 0
    for epoch in range(epochs):
        for xb, yb in batches(dataset, run.batch_size, data_rng):
            if step >= total:
                break
            lam = schedule_lambda(step, schedule, total) if schedule is not None else 0.0
            t_logits = teacher.predict_logits(xb) if teacher is not None and run.alpha < 1.0 else None
            with ad.Tape() as tape:
                logits = model(xb, training=True, rng=drop_rng)
                rv = reg_term(model.scores, reg.scaled(lam)) if (reg is not None and lam > 0) else None
                loss = combined_loss(logits, yb, t_logits, run.alpha, run.temperature, rv)
            lv = float(loss.item())
            if not math.isfinite(lv):
                raise RunError("non-finite loss", step)
            tape.backward(loss)
            opt.step(0)
            if schedule is not None and scores_trainable(step, schedule, total):
                opt.step(1)
            if protect:
                for st in model.scores:
                    st.clamp_protected()
            opt.zero_grad()
            if run.log_every and step % run.log_every == 0:
                row = {"step": step, "lambda": lam, "accuracy": float((logits.data.argmax(1) == yb).mean()),
                       "loss": lv}
                if model.scores:
                    rep = density_report(model)
                    row["density"] = rep["density"]
                    row["head_compression"] = rep["head_compression"]
                history.append(row)
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, step, total)
    return history


def train_dense(config, dataset, epochs, *, seed=0, model=None, run=None, teacher=None):
    """Plain fine-tuning; returns ``(model, history)``.

    ``model`` continues training an existing encoder, otherwise a fresh one
    is initialized from ``seed``.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if model is None:
        model = Encoder(config, seed=seed)
    if run is None:
        run = TrainRun(method="hybrid", teacher=None, alpha=1.0, seed=seed)
    history = _train_loop(model, dataset, epochs, run, teacher=teacher)
    return model, history


@dataclass
class PruneResult:
    model: Encoder
    history: list
    best: Encoder | None = None
    best_accuracy: float | None = None
    reg: object = None


def fine_prune(run, start_model, dataset, teacher=None, *, dev=None, protection=None, keep_best=False):
    """Block movement pruning from a dense ``start_model``.

    The start model and the teacher are not modified.  With ``keep_best``
    and a ``dev`` set, the best cool-down epoch (masks frozen) is kept.
    """
    if start_model.has_scores() or start_model.is_compact():
        raise ContractError("fine_prune starts from a dense, unscored model")
    if run.teacher is not None and teacher is None and run.alpha < 1.0:
        raise ContractError(f"method {run.method!r} needs a teacher model")
    model = start_model.clone()
    reg = attach_method(model, run.method, run.block_size, att_block=run.att_block,
                        tied_heads=run.tied_heads, balance=run.balance)
    if protection is not None:
        protection.apply(model)
    teacher = teacher if run.teacher is not None else None
    best = {"acc": None, "model": None}

    def on_epoch(epoch, step, total):
        if not (keep_best and dev is not None):
            return
        _, _, c = run.schedule.bounds(total)
        if step <= c:
            return
        acc = evaluate(model, dev)["accuracy"]
        if best["acc"] is None or acc > best["acc"]:
            best["acc"], best["model"] = acc, model.clone()

    history = _train_loop(model, dataset, run.schedule.total_epochs, run, teacher=teacher, reg=reg,
                          schedule=run.schedule, protect=protection is not None, on_epoch=on_epoch)
    return PruneResult(model, history, best["model"], best["acc"], reg)


def write_history(history, path):
    """Append rows to a history CSV, writing the header for a new file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        for row in history:
            w.writerow({k: row.get(k, "") for k in HISTORY_FIELDS})
