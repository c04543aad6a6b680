"""scikit-learn style wrappers around the train -> prune -> compact pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .compactor import compact, plan, verify_equivalence
from .data import Dataset, encode_text
from .model import ModelConfig, linear_param_census
from .trainer import PruneSchedule, TrainRun, fine_prune, train_dense


class ByteTokenizer(TransformerMixin, BaseEstimator):
    """Strings to fixed-length byte id rows (CLS first, zero padded)."""

    def __init__(self, max_len=32):
        self.max_len = max_len

    def fit(self, X, y=None):
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        self.n_features_out_ = self.max_len
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        return np.stack([encode_text(str(x), self.max_len) for x in X]) if len(X) else \
            np.zeros((0, self.max_len), dtype=np.int64)


class BlockPruningClassifier(ClassifierMixin, BaseEstimator):
    """Fit a dense encoder, fine-prune it with ``method`` and keep the compacted result.

    ``X`` holds token ids (``[n_samples, seq_len]``, ints below ``vocab_size``).
    """

    def __init__(self, method="hybrid", lam=1.0, epochs=4, teacher_epochs=2, d_model=64, n_heads=4, d_ff=256,
                 n_layers=2, vocab_size=256, dropout=0.0, lr=1e-3, batch_size=32, block_size=None,
                 att_block=32, compact=True, random_state=0):
        self.method = method
        self.lam = lam
        self.epochs = epochs
        self.teacher_epochs = teacher_epochs
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.vocab_size = vocab_size
        self.dropout = dropout
        self.lr = lr
        self.batch_size = batch_size
        self.block_size = block_size
        self.att_block = att_block
        self.compact = compact
        self.random_state = random_state

    def _validate_ids(self, X):
        X = check_array(X, dtype=np.int64)
        if X.min(initial=0) < 0 or X.max(initial=0) >= self.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        check_classification_targets(y)
        X = self._validate_ids(X)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        seed = int(self.random_state or 0)
        cfg = ModelConfig(d_model=self.d_model, n_heads=self.n_heads, d_ff=self.d_ff, n_layers=self.n_layers,
                          vocab_size=self.vocab_size, max_len=X.shape[1], n_classes=len(self.classes_),
                          dropout=self.dropout)
        data = Dataset(X, yi, len(self.classes_))
        dense_run = TrainRun(teacher=None, alpha=1.0, seed=seed, lr=self.lr, batch_size=self.batch_size, log_every=0)
        teacher, _ = train_dense(cfg, data, self.teacher_epochs, seed=seed, run=dense_run)
        run = TrainRun.for_method(self.method, seed=seed, lr=self.lr, batch_size=self.batch_size,
                                  block_size=self.block_size, att_block=self.att_block, log_every=0,
                                  schedule=PruneSchedule(total_epochs=self.epochs, lam_end=self.lam))
        res = fine_prune(run, teacher, data, teacher if run.teacher else None)
        model = res.model
        if self.compact:
            small = compact(model, plan(model))
            verify_equivalence(model, small)
            model = small
        census = linear_param_census(model)
        self.model_ = model
        self.density_ = census["nonzero"] / census["dense_total"]
        self.n_features_in_ = X.shape[1]
        self.history_ = res.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_ids(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} tokens per row, got {X.shape[1]}")
        z = self.model_.predict_logits(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
