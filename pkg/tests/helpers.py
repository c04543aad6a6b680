"""Shared fixtures-by-function for the test suite."""
import numpy as np

from blockprune.model import ModelConfig


def tiny_config(**kw):
    base = dict(d_model=8, n_heads=2, d_ff=16, n_layers=2, vocab_size=16, max_len=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_kind_case(kind, r):
    """Random (upstream, W, block) terms for one score group of ``kind``."""
    if kind in ("unstructured", "square"):
        b = 1 if kind == "unstructured" else int(r.choice([2, 4]))
        M, N = b * r.integers(1, 5), b * r.integers(1, 5)
        return [(r.normal(size=(M, N)), r.normal(size=(M, N)), (b, b))], {"b": b}
    if kind == "dim":
        d, dff = int(r.integers(2, 6)), int(r.integers(2, 9))
        terms = [(r.normal(size=(dff, d)), r.normal(size=(dff, d)), (1, d)),
                 (r.normal(size=(d, dff)), r.normal(size=(d, dff)), (d, 1))]
        return terms, {"d": d, "dff": dff}
    H, dh = int(r.integers(1, 5)), int(r.integers(1, 4))
    d = H * dh
    terms = [(r.normal(size=(d, d)), r.normal(size=(d, d)), (dh, d)) for _ in range(3)]
    terms.append((r.normal(size=(d, d)), r.normal(size=(d, d)), (d, dh)))
    return terms, {"H": H, "dh": dh}


def brute_score_grad(kind, terms, geom):
    """Loop over every weight entry and add ``upstream * W`` to its owning score."""
    if kind in ("unstructured", "square"):
        (U, W, _), b = terms[0], geom["b"]
        gn = W.shape[1] // b
        g = np.zeros((W.shape[0] // b) * gn)
        for i in range(W.shape[0]):
            for j in range(W.shape[1]):
                g[(i // b) * gn + j // b] += U[i, j] * W[i, j]
        return g
    if kind == "dim":
        g = np.zeros(geom["dff"])
        (U1, W1, _), (U2, W2, _) = terms
        for j in range(geom["dff"]):
            for k in range(geom["d"]):
                g[j] += U1[j, k] * W1[j, k] + U2[k, j] * W2[k, j]
        return g
    H, dh = geom["H"], geom["dh"]
    g = np.zeros(H)
    for t, (U, W, _) in enumerate(terms):
        for i in range(W.shape[0]):
            for j in range(W.shape[1]):
                head = j // dh if t == 3 else i // dh
                g[head] += U[i, j] * W[i, j]
    return g
