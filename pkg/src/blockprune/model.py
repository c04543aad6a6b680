"""Encoder-only mini transformer with prunable linear layers."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .pruning import FAMILIES, binding_mask, mask_op, masked_weight


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 4
    vocab_size: int = 256
    max_len: int = 64
    n_classes: int = 2
    activation: str = "gelu"
    dropout: float = 0.1
    # set after compaction: surviving heads / FFN dims per layer
    layer_heads: list | None = None
    layer_ffn: list | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.d_ff < self.d_model:
            raise ContractError("d_ff must be >= d_model")
        if self.activation not in ("gelu", "relu"):
            raise ContractError(f"activation must be gelu or relu, got {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        for name in ("layer_heads", "layer_ffn"):
            v = getattr(self, name)
            if v is not None:
                v = [int(x) for x in v]
                if len(v) != self.n_layers or min(v) < 1:
                    raise ContractError(f"{name} needs one positive entry per layer")
                setattr(self, name, v)

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def heads(self, i):
        return self.layer_heads[i] if self.layer_heads else self.n_heads

    def ffn_dim(self, i):
        return self.layer_ffn[i] if self.layer_ffn else self.d_ff

    def dense_linear_params(self):
        return self.n_layers * (4 * self.d_model**2 + 2 * self.d_model * self.d_ff)

    def large(self):
        """Doubled-width teacher configuration."""
        return ModelConfig(**{**self.to_dict(), "d_model": 2 * self.d_model, "d_ff": 2 * self.d_ff,
                              "layer_heads": None, "layer_ffn": None})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class PrunableLinear:
    """``y = x W'^T + b`` where ``W'`` is the block-masked weight when scored."""

    def __init__(self, weight, bias, family):
        self.weight = weight
        self.bias = bias
        self.family = family
        self.mask = None  # pruning.MaskBinding

    def effective(self):
        if self.mask is None:
            return self.weight
        return masked_weight(self.weight, mask_op(self.mask))

    def mask_array(self):
        if self.mask is None:
            return np.ones(self.weight.shape, dtype=bool)
        return binding_mask(self.mask)

    def effective_array(self):
        if self.mask is None:
            return self.weight.data
        return self.weight.data * binding_mask(self.mask)

    def __call__(self, x):
        return ad.linear(x, self.effective(), self.bias)


@dataclass
class EncoderLayer:
    q: PrunableLinear
    k: PrunableLinear
    v: PrunableLinear
    o: PrunableLinear
    ffn1: PrunableLinear
    ffn2: PrunableLinear
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    n_heads: int = field(default=1)

    def linears(self):
        return {f: getattr(self, f) for f in FAMILIES}


def _uniform_linear(rng, out_f, in_f, family):
    bound = 1.0 / math.sqrt(in_f)
    w = Tensor(rng.uniform(-bound, bound, (out_f, in_f)), requires_grad=True)
    b = Tensor(np.zeros(out_f), requires_grad=True)
    return PrunableLinear(w, b, family)


class Encoder:
    """Token + learned position embeddings, post-LN encoder layers, first-token classifier."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = ad.make_rng(seed, 0)
        d = config.d_model
        self.tok = Tensor(rng.normal(0.0, 0.02, (config.vocab_size, d)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.02, (config.max_len, d)), requires_grad=True)
        self.layers = []
        dh = config.head_dim
        for i in range(config.n_layers):
            h, dff = config.heads(i), config.ffn_dim(i)
            self.layers.append(EncoderLayer(
                q=_uniform_linear(rng, h * dh, d, "q"),
                k=_uniform_linear(rng, h * dh, d, "k"),
                v=_uniform_linear(rng, h * dh, d, "v"),
                o=_uniform_linear(rng, d, h * dh, "o"),
                ffn1=_uniform_linear(rng, dff, d, "ffn1"),
                ffn2=_uniform_linear(rng, d, dff, "ffn2"),
                ln1_gain=Tensor(np.ones(d), requires_grad=True),
                ln1_bias=Tensor(np.zeros(d), requires_grad=True),
                ln2_gain=Tensor(np.ones(d), requires_grad=True),
                ln2_bias=Tensor(np.zeros(d), requires_grad=True),
                n_heads=h,
            ))
        self.cls = _uniform_linear(rng, config.n_classes, d, "cls")
        self.scores = []
        self.patterns = None

    # -- parameters -------------------------------------------------------

    def named_parameters(self):
        yield "embed.tok", self.tok
        yield "embed.pos", self.pos
        for i, layer in enumerate(self.layers):
            pre = f"layers.{i}"
            for f in FAMILIES:
                lin = getattr(layer, f)
                sub = "attn" if f in ("q", "k", "v", "o") else "ffn"
                yield f"{pre}.{sub}.{f}.weight", lin.weight
                yield f"{pre}.{sub}.{f}.bias", lin.bias
            yield f"{pre}.ln1.gain", layer.ln1_gain
            yield f"{pre}.ln1.bias", layer.ln1_bias
            yield f"{pre}.ln2.gain", layer.ln2_gain
            yield f"{pre}.ln2.bias", layer.ln2_bias
        yield "classifier.weight", self.cls.weight
        yield "classifier.bias", self.cls.bias

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def score_parameters(self):
        return [s.S for s in self.scores]

    def is_compact(self):
        c = self.config
        return c.layer_heads is not None or c.layer_ffn is not None

    def has_scores(self):
        return bool(self.scores)

    def clone(self):
        return copy.deepcopy(self)

    def checksum(self):
        import hashlib
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for s in self.scores:
            h.update(s.S.data.tobytes())
        return h.hexdigest()

    def bake_masks(self):
        """Multiply masks into raw weights and drop all scores."""
        for layer in self.layers:
            for lin in layer.linears().values():
                if lin.mask is not None:
                    lin.weight.data = (lin.weight.data * lin.mask_array()).astype(lin.weight.dtype)
                    lin.mask = None
        self.scores = []
        self.patterns = None
        return self

    def __call__(self, ids, training=False, rng=None):
        return encode_forward(ids, self, training=training, rng=rng)

    def predict_logits(self, ids, batch_size=256):
        ids = np.asarray(ids)
        out = [encode_forward(ids[i:i + batch_size], self).data for i in range(0, len(ids), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_classes))


def _act(x, kind):
    return ad.gelu(x) if kind == "gelu" else ad.relu(x)


def mha_forward(x, layer, config):
    """Scaled dot-product attention over ``layer.n_heads`` heads, before the residual."""
    B, L, _ = x.shape
    h, dh = layer.n_heads, config.head_dim
    if h < 1:
        raise ContractError("attention layer needs at least one head")

    def split(t):
        return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

    q = split(layer.q(x))
    k = split(layer.k(x))
    v = split(layer.v(x))
    att = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax(att, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, h * dh))
    return layer.o(ctx)


def ffn_forward(x, layer, config):
    return layer.ffn2(_act(layer.ffn1(x), config.activation))


def encode_forward(ids, model, training=False, rng=None):
    cfg = model.config
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ContractError(f"ids must be [batch, length], got shape {ids.shape}")
    B, L = ids.shape
    if L > cfg.max_len:
        raise ContractError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    p = cfg.dropout if training else 0.0
    if p > 0 and rng is None:
        raise ContractError("training with dropout needs an rng")
    x = ad.add(ad.embedding_lookup(model.tok, ids), ad.embedding_lookup(model.pos, np.arange(L)))
    x = ad.dropout(x, p, rng, training)
    for layer in model.layers:
        a = ad.dropout(mha_forward(x, layer, cfg), p, rng, training)
        x = ad.layer_norm(ad.add(x, a), layer.ln1_gain, layer.ln1_bias)
        f = ad.dropout(ffn_forward(x, layer, cfg), p, rng, training)
        x = ad.layer_norm(ad.add(x, f), layer.ln2_gain, layer.ln2_bias)
    return model.cls(ad.take_first(x))


def linear_param_census(model):
    """Counts over the six prunable families only, using masked weights."""
    per = {f: {"total": 0, "nonzero": 0} for f in FAMILIES}
    for layer in model.layers:
        for f, lin in layer.linears().items():
            W = lin.effective_array()
            per[f]["total"] += W.size
            per[f]["nonzero"] += int(np.count_nonzero(W))
    return {
        "total": sum(c["total"] for c in per.values()),
        "nonzero": sum(c["nonzero"] for c in per.values()),
        "dense_total": model.config.dense_linear_params(),
        "per_family": per,
    }
