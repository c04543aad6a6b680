import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from blockprune.data import TaskSpec, gen_synth
from blockprune.estimator import BlockPruningClassifier, ByteTokenizer

SMALL = dict(d_model=16, n_heads=2, d_ff=32, n_layers=1, epochs=2, teacher_epochs=2, lam=0.003, att_block=8)


@pytest.fixture(scope="module")
def needle():
    return gen_synth(TaskSpec(kind="synth:needle", train_size=256, dev_size=64, seq_len=16))


@pytest.fixture(scope="module")
def fitted(needle):
    train, _ = needle
    clf = BlockPruningClassifier(**SMALL)
    return clf.fit(train.ids, train.labels * 3 + 1)  # labels {1, 4}


def test_params_roundtrip():
    clf = BlockPruningClassifier(lam=0.5)
    assert clf.get_params()["lam"] == 0.5
    assert clone(clf).get_params() == clf.get_params()


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        BlockPruningClassifier().predict(np.zeros((1, 4), dtype=int))


def test_fit_predict(fitted, needle):
    _, dev = needle
    pred = fitted.predict(dev.ids)
    assert set(np.unique(pred)) <= {1, 4}
    proba = fitted.predict_proba(dev.ids)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-6)
    assert 0.0 <= fitted.score(dev.ids, dev.labels * 3 + 1) <= 1.0
    assert 0.0 < fitted.density_ <= 1.0 and not fitted.model_.scores


def test_validation(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.full((2, 16), 999))
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 15), dtype=int))
    with pytest.raises(ValueError):
        BlockPruningClassifier(**SMALL).fit(np.zeros((4, 16), dtype=int), np.zeros(4))


def test_tokenizer_pipeline():
    texts = ["a z b", "abc", "zz", "qq"] * 16
    y = np.array([int("z" in t) for t in texts])
    pipe = make_pipeline(ByteTokenizer(max_len=8), BlockPruningClassifier(**{**SMALL, "epochs": 1}))
    pipe.fit(texts, y)
    assert pipe.predict(texts[:4]).shape == (4,)
    assert ByteTokenizer(max_len=8).fit_transform(["hi"]).tolist() == [[1, 104, 105, 0, 0, 0, 0, 0]]
