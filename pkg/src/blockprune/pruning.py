"""Block movement pruning: block-shared scores, threshold masks, regularizer.

Weights are stored ``[out, in]``.  Every pattern reduces to a grid of
score entries, each covering a rectangular block of the weight:

=================  =====================  ======================
pattern            grid on ``[M, N]``     block
=================  =====================  ======================
Square(s)          ``(M/s, N/s)``         ``(s, s)``
Dim, ffn1          ``(d_ff, 1)``          ``(1, d_model)``
Dim, ffn2          ``(1, d_ff)``          ``(d_model, 1)``
Heads, q/k/v       ``(H, 1)``             ``(d_head, d_model)``
Heads, o           ``(1, H)``             ``(d_model, d_head)``
=================  =====================  ======================

Dim scores are one vector shared by ffn1 and ffn2; Heads scores are one
vector shared by q, k, v and o unless ``tied=False``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _result, _sigmoid_np, sigmoid, sum_all, scale, add
from .errors import ContractError, DimensionError

TAU = 0.0
SCORE_INIT = 0.01

ATT_FAMILIES = ("q", "k", "v", "o")
FFN_FAMILIES = ("ffn1", "ffn2")
FAMILIES = ATT_FAMILIES + FFN_FAMILIES

SQUARE_SIZES = (1, 4, 8, 16, 32)


@dataclass(frozen=True)
class BlockPattern:
    kind: str  # "square" | "dim" | "heads"
    size: int = 1
    tied: bool = True

    def __post_init__(self):
        if self.kind not in ("square", "dim", "heads"):
            raise ContractError(f"unknown pattern kind {self.kind!r}")
        if self.kind == "square" and self.size < 1:
            raise ContractError("square block size must be >= 1")

    @classmethod
    def unstructured(cls):
        return cls("square", 1)

    @classmethod
    def square(cls, size):
        if size not in SQUARE_SIZES:
            raise ContractError(f"square block size must be one of {SQUARE_SIZES[1:]} (or 1), got {size}")
        return cls("square", size)

    @classmethod
    def dim(cls):
        return cls("dim")

    @classmethod
    def heads(cls, tied=True):
        return cls("heads", tied=tied)

    def label(self):
        if self.kind == "square":
            return "unstructured" if self.size == 1 else f"square{self.size}"
        return self.kind if self.tied or self.kind == "dim" else "heads-untied"

    def group_params(self, d_model, n_heads):
        """Weight parameters governed by one score entry.

        A head group is counted as one projection's head slab, which is
        the accounting behind the 1/32 attention/FFN ratio on BERT-base.
        """
        if self.kind == "square":
            return self.size * self.size
        if self.kind == "dim":
            return 2 * d_model
        return (d_model // n_heads) * d_model


class ScoreTensor:
    """One learnable score per block group, shared by its bound matrices."""

    def __init__(self, shape, family, name, pattern, init=SCORE_INIT, dtype=None):
        self.S = Tensor(np.full(shape, init), requires_grad=True, name=name, dtype=dtype)
        self.family = family  # "att" | "ffn"
        self.name = name
        self.pattern = pattern
        self.protected = None  # bool array, same shape as S

    @property
    def shape(self):
        return self.S.shape

    def mask(self, tau=TAU):
        m = self.S.data > tau
        if self.protected is not None:
            m = m | self.protected
        return m

    def clamp_protected(self, floor=SCORE_INIT):
        if self.protected is not None:
            np.maximum(self.S.data, floor, out=self.S.data, where=self.protected)


@dataclass
class MaskBinding:
    score: ScoreTensor
    grid: tuple
    block: tuple


def expand_mask(scores, tau, block, shape):
    """Binary ``[M, N]`` mask with ``mask[i, j] = 1(S[i // M', j // N'] > tau)``."""
    scores = np.asarray(scores)
    grid = _grid_for(shape, block)
    if scores.size != grid[0] * grid[1]:
        raise DimensionError(f"score of size {scores.size} does not tile {shape} with blocks {block}")
    return _expand_bool(scores.reshape(grid) > tau, block).astype(np.float32)


def _grid_for(shape, block):
    M, N = shape
    bm, bn = block
    if bm < 1 or bn < 1 or M % bm or N % bn:
        raise DimensionError(f"block {block} does not divide matrix {shape}")
    return M // bm, N // bn


def _expand_bool(grid_mask, block):
    gr, gc = grid_mask.shape
    bm, bn = block
    return np.broadcast_to(grid_mask[:, None, :, None], (gr, bm, gc, bn)).reshape(gr * bm, gc * bn)


def block_sum(a, block):
    M, N = a.shape
    bm, bn = block
    return a.reshape(M // bm, bm, N // bn, bn).sum(axis=(1, 3))


def mask_op(binding, tau=TAU):
    """Expanded float mask as a tape node; backward is straight-through.

    The gradient arriving at a mask entry is summed over its block and
    passed unchanged to the shared score entry.
    """
    sc = binding.score
    bm = _expand_bool(sc.mask(tau).reshape(binding.grid), binding.block).astype(sc.S.dtype)
    shape = sc.S.shape

    def bw(g):
        return (block_sum(g, binding.block).reshape(shape),)

    return _result(bm, (sc.S,), bw)


def binding_mask(binding, tau=TAU):
    return _expand_bool(binding.score.mask(tau).reshape(binding.grid), binding.block)


def masked_weight(W, mask):
    """``W * mask``; as a tape op ``grad_W = upstream * mask``."""
    if not isinstance(W, Tensor):
        return np.asarray(W) * np.asarray(mask)
    if not isinstance(mask, Tensor):
        mask = Tensor(np.asarray(mask), dtype=W.dtype)
    if mask.shape != W.shape:
        raise DimensionError(f"mask {mask.shape} does not match weight {W.shape}")
    from .autodiff import mul
    return mul(W, mask)


def score_task_grad(terms):
    """Straight-through score gradient for one score group.

    ``terms`` is a list of ``(upstream, W, block)`` triples for every matrix
    bound to the score; the result is ``sum(upstream * W)`` over each block,
    accumulated across matrices and laid out on that matrix's grid.  The
    caller reshapes the per-matrix grids to the shared score shape.
    """
    out = None
    for upstream, W, block in terms:
        upstream, W = np.asarray(upstream), np.asarray(W)
        if upstream.shape != W.shape:
            raise DimensionError("upstream and weight shapes differ")
        _grid_for(W.shape, block)
        g = block_sum(upstream * W, block).reshape(-1)
        out = g if out is None else out + g
    return out


# -- regularizer ------------------------------------------------------------

@dataclass(frozen=True)
class RegWeights:
    lam_att: float
    lam_ffn: float
    base: float = 1.0
    rule: str = "balanced"  # "balanced" | "equal"

    def __post_init__(self):
        if self.lam_att < 0 or self.lam_ffn < 0:
            raise ContractError("regularization weights must be non-negative")

    def scaled(self, factor):
        return RegWeights(self.lam_att * factor, self.lam_ffn * factor, self.base * factor, self.rule)

    def for_family(self, family):
        return self.lam_att if family == "att" else self.lam_ffn


def balance_lambdas(lam_base, att_pattern, ffn_pattern, d_model, n_heads):
    """Scale each family's weight by ``g_min / g_family`` (group sizes in params)."""
    g_att = att_pattern.group_params(d_model, n_heads)
    g_ffn = ffn_pattern.group_params(d_model, n_heads)
    g_min = min(g_att, g_ffn)
    return RegWeights(lam_base * g_min / g_att, lam_base * g_min / g_ffn, lam_base, "balanced")


def reg_value_and_grad(scores, reg):
    """Closed form of the split penalty ``sum_f lam_f * sum(sigmoid(S_f))``.

    ``scores`` maps family ("att"/"ffn") to a list of score arrays.  Returns
    the value and, per family, the list of gradients ``lam_f * sigmoid'(S)``.
    """
    value = 0.0
    grads = {}
    for fam, arrays in scores.items():
        lam = reg.for_family(fam)
        grads[fam] = []
        for S in arrays:
            s = _sigmoid_np(np.asarray(S, dtype=np.float64))
            value += lam * float(s.sum())
            grads[fam].append(lam * s * (1.0 - s))
    return value, grads


def reg_term(score_tensors, reg):
    """Same penalty recorded on the active tape (gradient flows to scores)."""
    total = None
    for st in score_tensors:
        lam = reg.for_family(st.family)
        if lam == 0:
            continue
        term = scale(sum_all(sigmoid(st.S)), lam)
        total = term if total is None else add(total, term)
    return total


# -- attaching patterns to a model -----------------------------------------

METHODS = {
    # method: (attention pattern kind, uses teacher)
    "block": ("square", "base"),
    "hybrid": ("square", "base"),
    "hybrid_nt": ("square", None),
    "struct": ("heads", "base"),
    "hybrid_filled": ("square", "base"),
    "hybrid_filled_lt": ("square", "large"),
    "movement": ("unstructured", "base"),
}


def method_teacher(method):
    try:
        return METHODS[_norm_method(method)][1]
    except KeyError:
        raise ContractError(f"unknown pruning method {method!r}") from None


def _norm_method(method):
    return method.lower().replace(" ", "_").replace("-", "_")


def method_patterns(method, block_size=None, att_block=32, tied_heads=True):
    m = _norm_method(method)
    if m not in METHODS:
        raise ContractError(f"unknown pruning method {method!r}")
    if m == "block":
        p = BlockPattern.square(block_size or 32)
        return p, p
    if m == "movement":
        p = BlockPattern.unstructured()
        return p, p
    if m == "struct":
        return BlockPattern.heads(tied_heads), BlockPattern.dim()
    return BlockPattern.square(block_size or att_block), BlockPattern.dim()


def attach_method(model, method, block_size=None, *, att_block=32, tied_heads=True, lam_base=1.0,
                  balance=True):
    """Bind fresh score tensors to every prunable matrix per ``method``.

    Returns the :class:`RegWeights` for ``lam_base`` (balanced by group size
    unless ``balance=False``).
    """
    att_p, ffn_p = method_patterns(method, block_size, att_block, tied_heads)
    attach_patterns(model, att_p, ffn_p)
    cfg = model.config
    if balance:
        return balance_lambdas(lam_base, att_p, ffn_p, cfg.d_model, cfg.n_heads)
    return RegWeights(lam_base, lam_base, lam_base, "equal")


def attach_patterns(model, att_pattern, ffn_pattern):
    if model.is_compact():
        raise ContractError("cannot attach scores to a compacted model")
    dtype = model.layers[0].q.weight.dtype
    cfg = model.config
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    scores = []

    def own(lin, pattern, fam, name):
        M, N = lin.weight.shape
        b = (pattern.size, pattern.size)
        grid = _grid_for((M, N), b)
        st = ScoreTensor(grid, fam, name, pattern, dtype=dtype)
        scores.append(st)
        lin.mask = MaskBinding(st, grid, b)

    for i, layer in enumerate(model.layers):
        pre = f"layers.{i}"
        if att_pattern.kind == "square":
            for f in ATT_FAMILIES:
                own(getattr(layer, f), att_pattern, "att", f"{pre}.attn.{f}.score")
        elif att_pattern.kind == "heads":
            shared = ScoreTensor((H,), "att", f"{pre}.attn.heads.score", att_pattern, dtype=dtype) \
                if att_pattern.tied else None
            if shared is not None:
                scores.append(shared)
            for f in ATT_FAMILIES:
                st = shared
                if st is None:
                    st = ScoreTensor((H,), "att", f"{pre}.attn.{f}.score", att_pattern, dtype=dtype)
                    scores.append(st)
                if f == "o":
                    getattr(layer, f).mask = MaskBinding(st, (1, H), (d, dh))
                else:
                    getattr(layer, f).mask = MaskBinding(st, (H, 1), (dh, d))
        else:
            raise ContractError("dim pattern applies to FFN matrices only")

        if ffn_pattern.kind == "square":
            own(layer.ffn1, ffn_pattern, "ffn", f"{pre}.ffn.ffn1.score")
            own(layer.ffn2, ffn_pattern, "ffn", f"{pre}.ffn.ffn2.score")
        elif ffn_pattern.kind == "dim":
            dff = layer.ffn1.weight.shape[0]
            st = ScoreTensor((dff,), "ffn", f"{pre}.ffn.dims.score", ffn_pattern, dtype=dtype)
            scores.append(st)
            layer.ffn1.mask = MaskBinding(st, (dff, 1), (1, d))
            layer.ffn2.mask = MaskBinding(st, (1, dff), (d, 1))
        else:
            raise ContractError("head pattern applies to attention matrices only")
    model.scores = scores
    model.patterns = {"att": att_pattern, "ffn": ffn_pattern}
    return scores


# -- reporting --------------------------------------------------------------

def head_nonempty(model):
    """Per layer, a bool array: head has any nonzero effective weight."""
    out = []
    for layer in model.layers:
        dh = model.config.head_dim
        h = layer.n_heads
        alive = np.zeros(h, dtype=bool)
        for f in ("q", "k", "v"):
            W = layer_effective(getattr(layer, f))
            alive |= (W.reshape(h, dh, -1) != 0).any(axis=(1, 2))
        Wo = layer_effective(layer.o)
        alive |= (Wo.reshape(Wo.shape[0], h, dh) != 0).any(axis=(0, 2))
        out.append(alive)
    return out


def layer_effective(lin):
    return lin.effective_array()


def density_report(model):
    from .model import linear_param_census
    census = linear_param_census(model)
    alive = head_nonempty(model)
    total_heads = model.config.n_heads * model.config.n_layers
    nonempty = int(sum(a.sum() for a in alive))
    return {
        "density": census["nonzero"] / census["dense_total"],
        "per_family": {f: (c["nonzero"] / c["total"] if c["total"] else 0.0)
                       for f, c in census["per_family"].items()},
        "nonempty_heads": nonempty,
        "total_heads": total_heads,
        "head_compression": total_heads / nonempty if nonempty else float("inf"),
    }
