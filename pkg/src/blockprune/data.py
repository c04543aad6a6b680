"""Byte-level datasets: seeded synthetic tasks and TSV ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .errors import DatasetError

PAD, CLS, SEP = 0, 1, 2
# synthetic alphabets: lowercase letters, disjoint from the special ids
_ALPHA = np.frombuffer(b"abcdefghijklmnop", dtype=np.uint8).astype(np.int64)
_NEEDLE = ord("z")
_MAJ_A = np.frombuffer(b"abcdefgh", dtype=np.uint8).astype(np.int64)
_MAJ_B = np.frombuffer(b"ijklmnop", dtype=np.uint8).astype(np.int64)

TASK_KINDS = ("synth:needle", "synth:pairdup", "synth:majority", "file:tsv")


@dataclass
class Dataset:
    ids: np.ndarray  # [N, L] int64
    labels: np.ndarray  # [N] int64
    n_classes: int
    label_names: list = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.ids) == 0:
            raise DatasetError("dataset is empty")
        if len(self.ids) != len(self.labels):
            raise DatasetError("ids and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self):
        return self.ids.shape[1]

    def subset(self, idx):
        return Dataset(self.ids[idx], self.labels[idx], self.n_classes, self.label_names)


@dataclass
class TaskSpec:
    kind: str = "synth:pairdup"
    train_size: int = 2000
    dev_size: int = 500
    seed: int = 0
    seq_len: int = 32
    vocab_size: int = 256
    positive_rate: float = 0.5  # needle / pairdup
    path: str | None = None  # file:tsv training file
    dev_path: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 8:
            raise DatasetError("seq_len must be at least 8")

    def to_dict(self):
        return asdict(self)


def _needle(rng, L, p):
    body = rng.choice(_ALPHA, L - 1)
    label = int(rng.random() < p)
    if label:
        body[rng.integers(L - 1)] = _NEEDLE
    return np.concatenate([[CLS], body]), label


def _pairdup(rng, L, p):
    seg = (L - 2) // 2
    a = rng.choice(_ALPHA, seg)
    label = int(rng.random() < p)
    if label:
        b = a.copy()
        if rng.random() < 0.5:  # near-duplicate: one substituted token
            b[rng.integers(seg)] = rng.choice(_ALPHA)
    else:
        b = rng.choice(_ALPHA, seg)
    row = np.full(L, PAD, dtype=np.int64)
    row[0] = CLS
    row[1:1 + seg] = a
    row[1 + seg] = SEP
    row[2 + seg:2 + 2 * seg] = b
    return row, label


def _majority(rng, L, p):
    n = L - 1 if (L - 1) % 2 else L - 2  # odd body length, no ties
    from_b = rng.random(n) < rng.uniform(0.2, 0.8)
    body = np.where(from_b, rng.choice(_MAJ_B, n), rng.choice(_MAJ_A, n))
    row = np.full(L, PAD, dtype=np.int64)
    row[0] = CLS
    row[1:1 + n] = body
    return row, int(from_b.sum() * 2 > n)


_GENERATORS = {"synth:needle": _needle, "synth:pairdup": _pairdup, "synth:majority": _majority}


def _gen_range(spec, start, stop):
    fn = _GENERATORS[spec.kind]
    rows, labels = [], []
    for i in range(start, stop):
        row, y = fn(make_rng(spec.seed, i), spec.seq_len, spec.positive_rate)
        rows.append(row)
        labels.append(y)
    return Dataset(np.stack(rows), np.array(labels), 2, ["0", "1"])


def gen_synth(spec):
    """Train/dev splits; example ``i`` is drawn from its own counter stream.

    Train uses indices ``[0, train_size)``, dev uses the next ``dev_size``.
    """
    if spec.kind not in _GENERATORS:
        raise DatasetError(f"{spec.kind!r} is not a synthetic task")
    train = _gen_range(spec, 0, spec.train_size)
    dev = _gen_range(spec, spec.train_size, spec.train_size + spec.dev_size)
    return train, dev


def encode_text(text, max_len):
    data = text.encode("utf-8")[: max_len - 1]
    row = np.full(max_len, PAD, dtype=np.int64)
    row[0] = CLS
    row[1:1 + len(data)] = np.frombuffer(data, dtype=np.uint8)
    return row


def decode_ids(row):
    row = np.asarray(row)
    body = row[1:] if len(row) and row[0] == CLS else row
    end = np.flatnonzero(body == PAD)
    body = body[: end[0]] if len(end) else body
    return bytes(body.astype(np.uint8).tolist())


def ingest_tsv(path, max_len=64, label_names=None):
    """Read ``label<TAB>text`` lines.

    Labels are mapped to class ids in sorted order unless ``label_names`` is
    given (e.g. from the training split), in which case unknown labels fail.
    """
    path = Path(path)
    labels, rows = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            label, sep, text = line.partition("\t")
            if not sep or not label:
                raise DatasetError(f"{path}:{lineno}: expected 'label<TAB>text'")
            labels.append(label)
            rows.append(encode_text(text, max_len))
    if not rows:
        raise DatasetError(f"{path}: no examples")
    if label_names is None:
        label_names = sorted(set(labels))
    index = {name: i for i, name in enumerate(label_names)}
    y = []
    for lineno, lab in enumerate(labels, 1):
        if lab not in index:
            raise DatasetError(f"{path}: unknown label {lab!r} (example {lineno})")
        y.append(index[lab])
    return Dataset(np.stack(rows), np.array(y), max(len(label_names), 2), list(label_names))


def load_task(spec):
    if spec.kind == "file:tsv":
        if not spec.path:
            raise DatasetError("file:tsv task needs a path")
        train = ingest_tsv(spec.path, spec.seq_len)
        dev = ingest_tsv(spec.dev_path, spec.seq_len, train.label_names) if spec.dev_path else train
        return train, dev
    return gen_synth(spec)


def batches(dataset, batch_size, rng=None):
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield dataset.ids[idx], dataset.labels[idx]
