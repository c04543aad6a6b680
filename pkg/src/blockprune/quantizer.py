"""Weight-only int8 post-training quantization with per-row scales."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pruning import FAMILIES

QMAX = 127


@dataclass
class QuantTensor:
    q: np.ndarray  # int8, same shape as the source
    scale: np.ndarray  # float32, one per output row
    shape: tuple

    def __post_init__(self):
        self.shape = tuple(self.shape)

    @property
    def nbytes(self):
        return self.q.size + 4 * self.scale.size


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(W):
    """``scale_r = max|W[r]| / 127``; ``q = round_half_away(W / scale_r)``.

    An all-zero row gets scale 1 and codes 0.
    """
    W = np.asarray(W)
    if not np.all(np.isfinite(W)):
        raise ValueError("cannot quantize non-finite weights")
    W2 = W.reshape(W.shape[0], -1).astype(np.float64)
    amax = np.abs(W2).max(axis=1)
    scale = np.where(amax > 0, amax / QMAX, 1.0).astype(np.float32)
    # rows of subnormal magnitude would underflow to a zero float32 scale
    scale = np.maximum(scale, np.finfo(np.float32).smallest_subnormal)
    q = _round_half_away(W2 / scale.astype(np.float64)[:, None])
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return QuantTensor(q.reshape(W.shape), scale, W.shape)


def dequantize(Q, dtype=np.float32):
    s = Q.scale.astype(np.float64).reshape((-1,) + (1,) * (len(Q.shape) - 1))
    return (Q.q.astype(np.float64) * s).astype(dtype)


@dataclass
class QuantizedModel:
    model: object  # Encoder whose linear weights hold dequantized values
    tensors: dict  # name -> QuantTensor
    report: dict


def quantize_model(model):
    """Quantize the six linear families of a (compacted) encoder.

    The returned encoder evaluates with dequantized weights.  The size
    report compares linear-weight bytes against the dense float32 baseline
    of the same configuration.
    """
    from .model import linear_param_census

    qm = model.clone()
    tensors = {}
    census = linear_param_census(model)
    rows = 0
    for i, layer in enumerate(qm.layers):
        for f in FAMILIES:
            lin = getattr(layer, f)
            W = lin.effective_array()
            Q = quantize_tensor(W)
            tensors[f"layers.{i}.{f}"] = Q
            rows += Q.scale.size
            lin.weight.data = dequantize(Q, lin.weight.dtype)
            lin.mask = None
    qm.scores = []
    dense_bytes = 4 * census["dense_total"]
    stored_bytes = sum(Q.nbytes for Q in tensors.values())
    nonzero_bytes = census["nonzero"] + 4 * rows
    report = {
        "dense_float32_bytes": dense_bytes,
        "float32_bytes": 4 * census["total"],
        "int8_stored_bytes": stored_bytes,
        "int8_nonzero_bytes": nonzero_bytes,
        "scale_bytes": 4 * rows,
        "pruning_compression": census["dense_total"] / max(census["nonzero"], 1),
        "byte_factor": 4 * census["nonzero"] / nonzero_bytes,
        "combined_compression": dense_bytes / nonzero_bytes,
        "stored_compression": dense_bytes / stored_bytes,
    }
    return QuantizedModel(qm, tensors, report)
