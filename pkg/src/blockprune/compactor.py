"""Structural compaction of masked encoders, Hybrid Filled and rewinding."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, EquivalenceError
from .model import Encoder, ModelConfig
from .pruning import ATT_FAMILIES, FAMILIES, block_sum, head_nonempty

EQUIV_BOUND = 1e-4


@dataclass
class CompactPlan:
    kept_dims: list  # per layer, sorted int arrays
    kept_heads: list

    def __post_init__(self):
        self.kept_dims = [np.unique(np.asarray(k, dtype=np.int64)) for k in self.kept_dims]
        self.kept_heads = [np.unique(np.asarray(k, dtype=np.int64)) for k in self.kept_heads]
        if len(self.kept_dims) != len(self.kept_heads):
            raise DimensionError("plan needs dims and heads for the same layers")
        for d, h in zip(self.kept_dims, self.kept_heads):
            if len(d) == 0 or len(h) == 0:
                raise DimensionError("every layer must keep at least one head and one FFN dim")

    @classmethod
    def identity(cls, model):
        return cls([np.arange(l.ffn1.weight.shape[0]) for l in model.layers],
                   [np.arange(l.n_heads) for l in model.layers])

    def is_identity(self, model):
        return all(len(d) == l.ffn1.weight.shape[0] and len(h) == l.n_heads
                   for d, h, l in zip(self.kept_dims, self.kept_heads, model.layers))


def _unit_scores(layer, dh, unit):
    """Per head (``unit='head'``) or FFN dim: the best score over covering groups.

    Unscored layers fall back to weight L1 mass.
    """
    fams = ATT_FAMILIES if unit == "head" else ("ffn1", "ffn2")
    best = None
    for f in fams:
        lin = getattr(layer, f)
        if lin.mask is None:
            vals, reduce = np.abs(lin.weight.data).astype(np.float64), np.sum
        else:
            b = lin.mask
            grid = b.score.S.data.reshape(b.grid).astype(np.float64)
            vals, reduce = np.repeat(np.repeat(grid, b.block[0], 0), b.block[1], 1), np.max
        if f in ("o", "ffn2"):
            vals = vals.T  # unit index on the leading axis
        if unit == "head":
            vals = vals.reshape(layer.n_heads, -1)
        red = reduce(vals, axis=1)
        best = red if best is None else np.maximum(best, red)
    return best


def plan(model):
    """Keep every FFN dim and head holding any nonzero effective weight.

    A layer that would lose all heads (or all dims) keeps its
    highest-scoring one.
    """
    dh = model.config.head_dim
    alive_heads = head_nonempty(model)
    dims, heads = [], []
    for layer, alive in zip(model.layers, alive_heads):
        W1 = layer.ffn1.effective_array()
        W2 = layer.ffn2.effective_array()
        d_alive = (W1 != 0).any(axis=1) | (W2 != 0).any(axis=0)
        if not d_alive.any():
            d_alive[np.argmax(_unit_scores(layer, dh, "dim"))] = True
        if not alive.any():
            alive = alive.copy()
            alive[np.argmax(_unit_scores(layer, dh, "head"))] = True
        dims.append(np.flatnonzero(d_alive))
        heads.append(np.flatnonzero(alive))
    return CompactPlan(dims, heads)


def _head_rows(kept, dh):
    return (kept[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)


def crop_masks(model, plan_):
    """Masks of ``model`` cropped to the plan's kept region (bool, per layer/family)."""
    dh = model.config.head_dim
    out = []
    for layer, dims, heads in zip(model.layers, plan_.kept_dims, plan_.kept_heads):
        rows = _head_rows(heads, dh)
        m = {f: getattr(layer, f).mask_array() for f in FAMILIES}
        out.append({
            "q": m["q"][rows], "k": m["k"][rows], "v": m["v"][rows], "o": m["o"][:, rows],
            "ffn1": m["ffn1"][dims], "ffn2": m["ffn2"][:, dims],
        })
    return out


def _check_plan(model, plan_):
    if len(plan_.kept_dims) != len(model.layers):
        raise DimensionError(f"plan covers {len(plan_.kept_dims)} layers, model has {len(model.layers)}")
    for i, (layer, dims, heads) in enumerate(zip(model.layers, plan_.kept_dims, plan_.kept_heads)):
        if dims.max() >= layer.ffn1.weight.shape[0] or dims.min() < 0:
            raise DimensionError(f"layer {i}: FFN dim index out of range")
        if heads.max() >= layer.n_heads or heads.min() < 0:
            raise DimensionError(f"layer {i}: head index out of range")


def compact(model, plan_):
    """Dense encoder holding only the planned heads and FFN dims.

    Weights are the effective (masked) weights; scores are dropped.
    """
    _check_plan(model, plan_)
    cfg = model.config
    dh = cfg.head_dim
    new_cfg = replace(cfg, layer_heads=[len(h) for h in plan_.kept_heads],
                      layer_ffn=[len(d) for d in plan_.kept_dims])
    new = Encoder.__new__(Encoder)
    new.config = new_cfg
    new.scores = []
    new.patterns = None
    src = model.clone()
    new.tok, new.pos, new.cls = src.tok, src.pos, src.cls
    new.layers = []
    for layer, dims, heads in zip(src.layers, plan_.kept_dims, plan_.kept_heads):
        rows = _head_rows(heads, dh)
        eff = {f: getattr(layer, f).effective_array() for f in FAMILIES}
        crop = {
            "q": (eff["q"][rows], layer.q.bias.data[rows]),
            "k": (eff["k"][rows], layer.k.bias.data[rows]),
            "v": (eff["v"][rows], layer.v.bias.data[rows]),
            "o": (eff["o"][:, rows], layer.o.bias.data),
            "ffn1": (eff["ffn1"][dims], layer.ffn1.bias.data[dims]),
            "ffn2": (eff["ffn2"][:, dims], layer.ffn2.bias.data),
        }
        for f, (w, b) in crop.items():
            lin = getattr(layer, f)
            lin.weight = ad.Tensor(np.ascontiguousarray(w), requires_grad=True, dtype=w.dtype)
            lin.bias = ad.Tensor(np.array(b), requires_grad=True, dtype=b.dtype)
            lin.mask = None
        layer.n_heads = len(heads)
        new.layers.append(layer)
    return new


def max_logit_deviation(a, b, n_batches=4, batch_size=16, seed=0, seq_len=None):
    cfg = a.config
    L = seq_len or cfg.max_len
    rng = ad.make_rng(seed, 7)
    worst = 0.0
    for _ in range(n_batches):
        ids = rng.integers(0, cfg.vocab_size, (batch_size, L))
        da, db = a.predict_logits(ids), b.predict_logits(ids)
        worst = max(worst, float(np.abs(da.astype(np.float64) - db).max()))
    return worst


def verify_equivalence(masked, compacted, n_batches=4, *, batch_size=16, seed=0, bound=EQUIV_BOUND,
                       raise_on_fail=True):
    """Max |logit difference| on random batches; raises above ``bound``."""
    dev = max_logit_deviation(masked, compacted, n_batches, batch_size, seed)
    if raise_on_fail and dev > bound:
        raise EquivalenceError(dev, bound)
    return dev


def fill_compact(compacted, masks, rng):
    """Re-draw masked-off entries inside the kept region from ``U(+-1/sqrt(fan_in))``.

    Returns, per layer and family, the bool array of filled positions.
    Biases are left alone.
    """
    filled = []
    for layer, lm in zip(compacted.layers, masks):
        pos = {}
        for f in FAMILIES:
            lin = getattr(layer, f)
            off = ~lm[f]
            pos[f] = off
            if off.any():
                bound = 1.0 / math.sqrt(lin.weight.shape[1])
                draw = rng.uniform(-bound, bound, lin.weight.shape).astype(lin.weight.dtype)
                lin.weight.data = np.where(off, draw, lin.weight.data)
        filled.append(pos)
    return filled


def hybrid_fill(model, plan_, rng, steps=0, *, dataset=None, teacher=None, run=None):
    """Compact, refill reclaimed zeros, then fine-tune the small dense model.

    Returns ``(compact_model, filled_positions)``.
    """
    from .trainer import TrainRun, _train_loop
    masks = crop_masks(model, plan_)
    small = compact(model, plan_)
    filled = fill_compact(small, masks, rng)
    if steps > 0:
        if dataset is None:
            raise ValueError("fine-tuning after fill needs a dataset")
        run = run or TrainRun(method="hybrid_filled", teacher="base" if teacher is not None else None)
        t = teacher if run.teacher is not None else None
        epochs = math.ceil(steps / math.ceil(len(dataset) / run.batch_size))
        _train_loop(small, dataset, epochs, run, teacher=t, max_steps=steps)
    return small, filled


@dataclass
class ProtectionMask:
    heads: list  # per layer bool array over the original heads

    def apply(self, model):
        """Mark score groups overlapping protected heads; their masks stay on."""
        dh = model.config.head_dim
        for layer, prot in zip(model.layers, self.heads):
            if len(prot) != layer.n_heads:
                raise DimensionError("protection mask does not match the head census")
            rows = np.repeat(np.asarray(prot, dtype=bool), dh)
            for f in ATT_FAMILIES:
                lin = getattr(layer, f)
                if lin.mask is None:
                    continue
                M, N = lin.weight.shape
                region = np.zeros((M, N), dtype=bool)
                if f == "o":
                    region[:, rows] = True
                else:
                    region[rows, :] = True
                b = lin.mask
                grid_prot = block_sum(region.astype(np.int64), b.block) > 0
                grid_prot = grid_prot.reshape(b.score.shape)
                st = b.score
                st.protected = grid_prot if st.protected is None else (st.protected | grid_prot)
                st.clamp_protected()
        return model

    def count(self):
        return int(sum(np.sum(h) for h in self.heads))


def rewind(first_model):
    """Protection flags for the heads that survived a first pruning run."""
    return ProtectionMask([a.copy() for a in head_nonempty(first_model)])
