import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanfuse import tensor as T
from chanfuse.cct import (
    CCT,
    channel_attention,
    concat_tokens,
    cross_attention_head,
    multi_head_attention,
    tokenize,
)
from chanfuse.config import ConfigError, ModelConfig
from chanfuse.gradcheck import check_model, jitter_constants
from chanfuse.tensor import Tensor
from chanfuse.unet import SegmentationNet


def naive_cross_attention(t_i, t_s, wq, wk, wv, eps=1e-5):
    """Scalar-loop evaluation of one channel-attention head."""
    d, ci = len(t_i), len(t_i[0])
    cs = len(t_s[0])
    q = [[sum(t_i[t][j] * wq[j][c] for j in range(ci)) for t in range(d)] for c in range(ci)]
    k = [[sum(t_s[t][j] * wk[j][s] for j in range(cs)) for t in range(d)] for s in range(cs)]
    v = [[sum(t_s[t][j] * wv[j][s] for j in range(cs)) for t in range(d)] for s in range(cs)]
    logits = [[sum(q[c][t] * k[s][t] for t in range(d)) / math.sqrt(cs) for s in range(cs)] for c in range(ci)]
    flat = [x for row in logits for x in row]
    mu = sum(flat) / len(flat)
    var = sum((x - mu) ** 2 for x in flat) / len(flat)
    normed = [[(x - mu) / math.sqrt(var + eps) for x in row] for row in logits]
    m = []
    for row in normed:
        top = max(row)
        e = [math.exp(x - top) for x in row]
        z = sum(e)
        m.append([x / z for x in e])
    ca = [[sum(m[c][s] * v[s][t] for s in range(cs)) for t in range(d)] for c in range(ci)]
    return np.array(ca), np.array(m)


# ------------------------------------------------------------ tokenization


def test_tokenize_grid_arithmetic():
    # (64/8)^2 patches
    tokens = tokenize(Tensor(np.zeros((16, 64, 64))), 8)
    assert tokens.shape == (64, 16)


def test_224_input_with_patch_16_gives_196_tokens():
    cfg = ModelConfig.ctrans(image_size=224, patch_size=16, base_channels=64)
    assert cfg.tokens == 196
    assert cfg.channels == (64, 128, 256, 512)
    assert sum(cfg.channels) == 960


@pytest.mark.parametrize("size,patch", [(64, 8), (64, 16), (128, 32), (224, 16), (32, 8)])
def test_all_levels_emit_equal_token_counts(size, patch):
    cfg = ModelConfig.ctrans(image_size=size, patch_size=patch, base_channels=2)
    counts = {
        tokenize(Tensor(np.zeros((1, 2, size // 2 ** (i - 1), size // 2 ** (i - 1)))), cfg.patch_size_at(i)).shape[-2]
        for i in (1, 2, 3, 4)
    }
    assert counts == {cfg.tokens}


def test_tokenize_is_patch_mean():
    x = np.arange(16.0).reshape(1, 4, 4)
    tokens = tokenize(Tensor(x), 2).data
    assert tokens[:, 0].tolist() == [2.5, 4.5, 10.5, 12.5]


def test_tokenize_rejects_indivisible_grid():
    with pytest.raises(ConfigError):
        tokenize(Tensor(np.zeros((2, 10, 10))), 4)


def test_concat_tokens_order_round_trip(rng):
    parts = [rng.standard_normal((4, 2)) for _ in range(4)]
    joined = concat_tokens([Tensor(p) for p in parts])
    assert joined.shape == (4, 8)
    for i, p in enumerate(parts):
        assert np.array_equal(joined.data[:, 2 * i:2 * i + 2], p)


# ----------------------------------------------------------- attention


def test_cross_attention_shapes(rng):
    ca, m = cross_attention_head(
        Tensor(rng.standard_normal((16, 4))), Tensor(rng.standard_normal((16, 10))),
        Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((10, 10))),
        Tensor(rng.standard_normal((10, 10))),
    )
    assert m.shape == (4, 10)
    assert ca.shape == (4, 16)


def test_uniform_similarity_gives_mean_of_value_rows(f64, rng):
    v = rng.standard_normal((5, 6))  # d×C_Σ
    q = np.zeros((5, 3))
    ca, m = channel_attention(Tensor(q), Tensor(rng.standard_normal((5, 6))), Tensor(v))
    assert np.allclose(m.data, 1 / 6)
    assert np.allclose(ca.data, np.tile(v.T.mean(axis=0), (3, 1)))


def test_matches_triple_loop_on_3x6x5(f64, rng):
    args = [rng.standard_normal(s) for s in [(5, 3), (5, 6), (3, 3), (6, 6), (6, 6)]]
    ca, m = cross_attention_head(*[Tensor(a) for a in args])
    ref_ca, ref_m = naive_cross_attention(*[a.tolist() for a in args])
    assert np.max(np.abs(ca.data - ref_ca)) < 1e-6
    assert np.max(np.abs(m.data - ref_m)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(2, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_matches_triple_loop_random(ci, cs, d, seed):
    r = np.random.default_rng(seed)
    args = [r.standard_normal(s) for s in [(d, ci), (d, cs), (ci, ci), (cs, cs), (cs, cs)]]
    with T.default_dtype(np.float64):
        ca, m = cross_attention_head(*[Tensor(a) for a in args])
    ref_ca, ref_m = naive_cross_attention(*[a.tolist() for a in args])
    assert np.max(np.abs(ca.data - ref_ca)) < 1e-6
    assert np.allclose(m.data.sum(axis=-1), 1, atol=1e-6)


def test_attention_shape_mismatch():
    with pytest.raises(T.ShapeError):
        cross_attention_head(Tensor(np.ones((4, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones((2, 2))),
                             Tensor(np.ones((5, 5))), Tensor(np.ones((5, 5))))


# --------------------------------------------------------------- modules


def _small_cct(**kw):
    cfg = ModelConfig.ctrans(image_size=32, patch_size=8, base_channels=2, heads=kw.pop("heads", 2),
                             cct_layers=kw.pop("cct_layers", 2), dtype="float64", **kw)
    return cfg, SegmentationNet(cfg, seed=3)


def _features(cfg, rng, batch=2):
    return [
        Tensor(rng.standard_normal((batch, c, cfg.image_size // 2**i, cfg.image_size // 2**i)))
        for i, c in enumerate(cfg.channels)
    ]


def test_single_head_average_is_the_head(f64, rng):
    cfg, net = _small_cct(heads=1)
    layer = net.cct.layers[0]
    t1 = Tensor(rng.standard_normal((16, 2)))
    ts = Tensor(rng.standard_normal((16, 30)))
    head = layer.heads[0]
    mca = multi_head_attention(t1, ts, layer.heads, "1")
    ca, _ = cross_attention_head(t1, ts, head.w_q["1"].weight, head.w_k.weight, head.w_v.weight)
    assert np.array_equal(mca.data, T.swap_last(ca).data)


def test_shared_head_weights_average_to_one_head(f64, rng):
    cfg, net = _small_cct(heads=4)
    heads = net.cct.layers[0].heads
    for h in heads[1:]:
        h.w_q["2"].weight.data[...] = heads[0].w_q["2"].weight.data
        h.w_k.weight.data[...] = heads[0].w_k.weight.data
        h.w_v.weight.data[...] = heads[0].w_v.weight.data
    t2 = Tensor(rng.standard_normal((16, 4)))
    ts = Tensor(rng.standard_normal((16, 30)))
    mca = multi_head_attention(t2, ts, heads, "2")
    ca, _ = cross_attention_head(t2, ts, heads[0].w_q["2"].weight, heads[0].w_k.weight, heads[0].w_v.weight)
    assert np.allclose(mca.data, T.swap_last(ca).data, atol=1e-12)


def test_default_heads_and_layers():
    cfg = ModelConfig()
    assert cfg.heads == 4 and cfg.cct_layers == 4


def test_zeroed_mlp_output_leaves_attention_only(f64, rng):
    cfg, net = _small_cct(heads=2, cct_layers=1)
    layer = net.cct.layers[0]
    for mlp in layer.mlp.values():
        mlp.fc2.weight.data[...] = 0
        mlp.fc2.bias.data[...] = 0
    tokens = {lv: Tensor(rng.standard_normal((2, 16, c))) for lv, c in zip("1234", cfg.channels)}
    kv = concat_tokens(list(tokens.values()))
    out = layer(tokens, kv)
    for lv, t in tokens.items():
        expected = multi_head_attention(layer.query_norm[lv](t), layer.kv_norm(kv), layer.heads, lv)
        assert np.allclose(out[lv].data, expected.data, atol=1e-12)
        assert out[lv].shape == t.shape


def test_cct_output_shapes_and_gradients(f64, rng):
    cfg, net = _small_cct()
    feats = _features(cfg, rng)
    for f in feats:
        f.requires_grad = True
    out = net.cct(feats)
    for lv in (1, 2, 3, 4):
        assert out[lv].shape == feats[lv - 1].shape
    loss = sum(((o * Tensor(rng.standard_normal(o.shape))).sum() for o in out.values()), Tensor(0.0))
    loss.backward()
    for name, p in net.cct.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
    for f in feats:
        assert np.any(f.grad != 0)


def test_similarity_rows_are_stochastic(f64, rng):
    cfg, net = _small_cct()
    net.cct.record = True
    net.cct(_features(cfg, rng))
    assert len(net.cct.recorded) == cfg.cct_layers * 4 * cfg.heads
    for layer, level, head, m in net.cct.recorded:
        assert m.shape == (2, cfg.channels[level - 1], sum(cfg.channels))
        assert np.all(m >= 0)
        assert np.all(np.abs(m.sum(axis=-1) - 1) < 1e-6)


def test_query_subset_q234_bypasses_level_one(f64, rng):
    cfg, net = _small_cct(query_levels="234")
    assert net.cct.query_levels == (2, 3, 4)
    feats = _features(cfg, rng)
    out = net.cct(feats)
    assert sorted(out) == [2, 3, 4]
    from chanfuse.config import EncoderFeatures
    skips = net.skip_features(EncoderFeatures(skips=feats))
    assert skips[0] is feats[0]


def test_key_subset_sets_sigma_width():
    cfg, net = _small_cct(key_levels="12")
    assert net.cct.c_sigma == cfg.channels[0] + cfg.channels[1]


def test_empty_query_levels_is_a_config_error():
    with pytest.raises(ConfigError):
        ModelConfig.ctrans(query_levels=())


def test_projected_and_token_residuals_differ(f64, rng):
    outs = []
    for source in ("projected", "tokens"):
        cfg, net = _small_cct(residual_source=source)
        outs.append(net.cct(_features(cfg, np.random.default_rng(0)))[1].data)
    assert not np.allclose(outs[0], outs[1])


def test_cct_finite_differences_on_16x16(f64):
    cfg = ModelConfig.ctrans(image_size=16, base_channels=2, heads=2, cct_layers=2, patch_size=8, dtype="float64")
    rng = np.random.default_rng(5)
    net = SegmentationNet(cfg, seed=5)
    jitter_constants(net, rng)
    n_tensors = len(list(net.named_parameters()))
    results = check_model(cfg, seed=5, n_samples=n_tensors + 10, model=net)
    cct_rows = [r for r in results if r[0].startswith(("cct.", "cca."))]
    assert cct_rows
    assert max(r[4] for r in results) < 1e-4
