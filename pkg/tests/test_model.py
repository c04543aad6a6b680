import math

import numpy as np
import pytest

from blockprune import autodiff as ad
from blockprune.errors import ContractError
from blockprune.model import Encoder, ModelConfig, encode_forward, ffn_forward, linear_param_census, mha_forward
from blockprune.pruning import attach_method

from helpers import tiny_config


def _x(shape, seed=0):
    return ad.Tensor(np.random.default_rng(seed).normal(size=shape))


class TestConfig:
    def test_heads_divide(self):
        with pytest.raises(ContractError):
            ModelConfig(d_model=10, n_heads=3)

    def test_dff_at_least_dmodel(self):
        with pytest.raises(ContractError):
            ModelConfig(d_model=64, d_ff=32)

    def test_large_doubles(self):
        big = ModelConfig().large()
        assert (big.d_model, big.d_ff, big.n_heads) == (256, 1024, 4)

    def test_roundtrip(self):
        cfg = tiny_config(layer_heads=[1, 2], layer_ffn=[3, 16])
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestMHA:
    def test_zero_output_projection(self):
        model = Encoder(tiny_config(), seed=0)
        layer = model.layers[0]
        layer.o.weight.data[:] = 0
        layer.o.bias.data[:] = 0
        assert np.all(mha_forward(_x((2, 5, 8)), layer, model.config).data == 0)

    def test_zero_value_head_contributes_nothing(self):
        model = Encoder(tiny_config(), seed=1)
        cfg = model.config
        layer = model.layers[0]
        dh = cfg.head_dim
        layer.v.weight.data[:dh] = 0
        layer.v.bias.data[:dh] = 0
        x = _x((2, 5, 8), 1)
        before = mha_forward(x, layer, cfg).data
        layer.o.weight.data[:, :dh] = np.random.default_rng(5).normal(size=(8, dh))
        np.testing.assert_allclose(mha_forward(x, layer, cfg).data, before, atol=1e-6)

    def test_replay_bitwise(self):
        ids = ad.make_rng(0).integers(0, 16, (3, 6))
        a = Encoder(tiny_config(dropout=0.1), seed=4)(ids, training=True, rng=ad.make_rng(1)).data
        b = Encoder(tiny_config(dropout=0.1), seed=4)(ids, training=True, rng=ad.make_rng(1)).data
        np.testing.assert_array_equal(a, b)


class TestFFN:
    def test_all_dims_masked(self):
        model = Encoder(tiny_config(), seed=0)
        attach_method(model, "hybrid", att_block=4)
        for st in model.scores:
            if st.family == "ffn":
                st.S.data[:] = -1
        layer = model.layers[0]
        out = ffn_forward(_x((2, 3, 8)), layer, model.config).data
        np.testing.assert_allclose(out, np.broadcast_to(layer.ffn2.bias.data, out.shape))

    def test_hand_evaluated_toy(self):
        cfg = ModelConfig(d_model=2, n_heads=1, d_ff=2, n_layers=1, activation="relu", dropout=0.0)
        model = Encoder(cfg, seed=0)
        layer = model.layers[0]
        layer.ffn1.weight.data[:] = [[1.0, -1.0], [2.0, 0.5]]
        layer.ffn1.bias.data[:] = [0.5, -1.0]
        layer.ffn2.weight.data[:] = [[1.0, 2.0], [-1.0, 3.0]]
        layer.ffn2.bias.data[:] = [0.25, 0.0]
        x = ad.Tensor(np.array([[[1.0, 2.0]]]))
        # h = relu([1-2+0.5, 2+1-1]) = [0, 2]; y = [0+4+0.25, 0+6]
        np.testing.assert_allclose(ffn_forward(x, layer, cfg).data, [[[4.25, 6.0]]])

    def test_masked_dim_equals_deleted(self):
        cfg = tiny_config(n_layers=1)
        model = Encoder(cfg, seed=2)
        layer = model.layers[0]
        x = _x((2, 3, 8), 3)
        k = 5
        layer.ffn1.weight.data[k] = 0
        layer.ffn1.bias.data[k] = 0
        layer.ffn2.weight.data[:, k] = 0
        masked = ffn_forward(x, layer, cfg).data
        keep = np.arange(cfg.d_ff) != k
        layer.ffn1.weight.data = layer.ffn1.weight.data[keep]
        layer.ffn1.bias.data = layer.ffn1.bias.data[keep]
        layer.ffn2.weight.data = np.ascontiguousarray(layer.ffn2.weight.data[:, keep])
        np.testing.assert_allclose(ffn_forward(x, layer, cfg).data, masked, atol=1e-6)


class TestEncode:
    def test_shape(self):
        model = Encoder(tiny_config(n_classes=3), seed=0)
        for B, L in [(1, 1), (4, 8), (2, 3)]:
            assert model(np.zeros((B, L), dtype=int)).shape == (B, 3)

    def test_eval_deterministic(self):
        model = Encoder(tiny_config(dropout=0.3), seed=0)
        ids = ad.make_rng(0).integers(0, 16, (3, 6))
        np.testing.assert_array_equal(model(ids).data, model(ids).data)

    def test_batch_permutation(self):
        model = Encoder(tiny_config(), seed=0)
        ids = ad.make_rng(1).integers(0, 16, (5, 6))
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(model(ids[perm]).data, model(ids).data[perm], atol=1e-6)

    def test_too_long(self):
        with pytest.raises(ContractError):
            Encoder(tiny_config(), seed=0)(np.zeros((1, 9), dtype=int))

    def test_uneven_heads_after_compaction(self):
        cfg = tiny_config(layer_heads=[1, 2], layer_ffn=[3, 16])
        model = Encoder(cfg, seed=0)
        assert model.layers[0].q.weight.shape == (4, 8)
        assert model(np.zeros((2, 4), dtype=int)).shape == (2, 2)

    @pytest.mark.parametrize("method", ["movement", "block", "hybrid", "struct"])
    @pytest.mark.parametrize("seed", range(3))
    def test_masked_equals_premultiplied(self, method, seed):
        model = Encoder(tiny_config(), seed=seed)
        attach_method(model, method, block_size=4, att_block=4)
        r = np.random.default_rng(seed)
        for st in model.scores:
            st.S.data[:] = r.normal(size=st.shape)
        ids = r.integers(0, 16, (4, 7))
        baked = model.clone().bake_masks()
        np.testing.assert_allclose(model(ids).data, baked(ids).data, atol=1e-6)


class TestCensus:
    def test_desk_total(self):
        cfg = ModelConfig(d_model=128, n_heads=4, d_ff=512, n_layers=4)
        c = linear_param_census(Encoder(cfg, seed=0))
        assert c["total"] == 4 * (4 * 128**2 + 2 * 128 * 512) == 786_432
        assert c["nonzero"] == c["total"] == cfg.dense_linear_params()

    def test_enumeration(self):
        model = Encoder(tiny_config(), seed=0)
        n = sum(getattr(l, f).weight.data.size for l in model.layers for f in ("q", "k", "v", "o", "ffn1", "ffn2"))
        assert linear_param_census(model)["total"] == n

    def test_fully_masked(self):
        model = Encoder(tiny_config(), seed=0)
        attach_method(model, "block", 4)
        for st in model.scores:
            st.S.data[:] = -1
        c = linear_param_census(model)
        assert c["nonzero"] == 0 and c["total"] > 0
        assert math.isclose(sum(v["total"] for v in c["per_family"].values()), c["total"])
