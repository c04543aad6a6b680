"""Checkpoint directories: ``config.json`` plus a ``tensors.bin`` blob.

``tensors.bin`` layout (little-endian)::

    b"BMP1"  u32 version(=1)  u32 count
    count x { u16 name_len, name(utf-8), u8 ndim, ndim x u64 dims,
              u8 dtype (0=float32, 1=int8), u64 payload_offset }
    payloads, row-major, each starting on a 64-byte boundary
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Encoder, ModelConfig
from .pruning import BlockPattern, attach_patterns
from .quantizer import QuantTensor, dequantize

MAGIC = b"BMP1"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1
ALIGN = 64
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_tensors(path, tensors):
    """Write ``{name: ndarray}`` (float32 or int8) to ``path`` atomically."""
    items = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in DTYPE_CODES:
            arr = arr.astype(np.float32)
        items.append((name.encode("utf-8"), np.ascontiguousarray(arr)))
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(items))
    header_len = len(header) + sum(2 + len(n) + 1 + 8 * a.ndim + 1 + 8 for n, a in items)
    offset = _align(header_len)
    entries, offsets = [], []
    for n, a in items:
        offsets.append(offset)
        entries.append(struct.pack("<H", len(n)) + n + struct.pack("<B", a.ndim)
                       + struct.pack(f"<{a.ndim}Q", *a.shape)
                       + struct.pack("<BQ", DTYPE_CODES[a.dtype], offset))
        offset = _align(offset + a.nbytes)
    blob = bytearray(header + b"".join(entries))
    for off, (_, a) in zip(offsets, items):
        blob.extend(b"\0" * (off - len(blob)))
        blob.extend(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    _atomic_write(Path(path), bytes(blob))


def read_tensors(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        code, off = struct.unpack_from("<BQ", buf, pos)
        pos += 9
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        dt = CODE_DTYPES[code].newbyteorder("<")
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).astype(dt.newbyteorder("="))
    return out


def _atomic_write(path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json(path, obj):
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def save(model, directory, *, metrics=None, quant=None, extra=None):
    """Write weights, scores and configuration.

    ``quant`` maps linear names (``layers.i.family``) to QuantTensors, which
    replace the float copies of those weights.
    """
    directory = Path(directory)
    tensors = {}
    qnames = set()
    if quant:
        for name, Q in quant.items():
            tensors[f"{name}.weight.q"] = Q.q
            tensors[f"{name}.weight.scale"] = Q.scale
            qnames.add(name)
    for name, p in model.named_parameters():
        key = _linear_key(name)
        if key in qnames and name.endswith(".weight"):
            continue
        tensors[name] = p.data
    for st in model.scores:
        tensors[st.name] = st.S.data
        if st.protected is not None:
            tensors[st.name + ".protected"] = st.protected.astype(np.int8)
    cfg = {
        "schema_version": SCHEMA_VERSION,
        "model": model.config.to_dict(),
        "patterns": ({k: {"kind": p.kind, "size": p.size, "tied": p.tied} for k, p in model.patterns.items()}
                     if model.patterns else None),
        "quantized": sorted(qnames),
        "metrics": metrics or {},
    }
    if extra:
        cfg.update(extra)
    write_tensors(directory / "tensors.bin", tensors)
    write_json(directory / "config.json", cfg)
    return directory


def _linear_key(param_name):
    # "layers.0.attn.q.weight" -> "layers.0.q"
    parts = param_name.split(".")
    if parts[0] == "layers" and len(parts) == 5:
        return f"layers.{parts[1]}.{parts[3]}"
    return None


def load(directory):
    """Rebuild an :class:`Encoder` (scores and quantized weights included).

    Returns ``(model, config_dict)``.
    """
    directory = Path(directory)
    cfg = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{directory}: unsupported schema version {cfg.get('schema_version')}")
    tensors = read_tensors(directory / "tensors.bin")
    model = Encoder(ModelConfig.from_dict(cfg["model"]), seed=0)
    quantized = set(cfg.get("quantized", []))
    for name, p in model.named_parameters():
        key = _linear_key(name)
        if key in quantized and name.endswith(".weight"):
            Q = QuantTensor(tensors[f"{key}.weight.q"], tensors[f"{key}.weight.scale"],
                            tensors[f"{key}.weight.q"].shape)
            p.data = dequantize(Q, np.float32)
            continue
        if name not in tensors:
            raise CheckpointError(f"{directory}: missing tensor {name}")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{directory}: {name} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(ad.get_default_dtype())
    if cfg.get("patterns"):
        pats = {k: BlockPattern(v["kind"], v["size"], v["tied"]) for k, v in cfg["patterns"].items()}
        attach_patterns(model, pats["att"], pats["ffn"])
        for st in model.scores:
            st.S.data = tensors[st.name].astype(st.S.dtype)
            prot = tensors.get(st.name + ".protected")
            if prot is not None:
                st.protected = prot.astype(bool)
    return model, cfg


def load_quant(directory):
    """QuantTensors stored in a checkpoint, by linear name."""
    directory = Path(directory)
    cfg = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    tensors = read_tensors(directory / "tensors.bin")
    return {k: QuantTensor(tensors[f"{k}.weight.q"], tensors[f"{k}.weight.scale"], tensors[f"{k}.weight.q"].shape)
            for k in cfg.get("quantized", [])}
