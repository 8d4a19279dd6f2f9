import math

import numpy as np
import pytest

from shortcutbreaker import autodiff as ad
from shortcutbreaker.attention import (AttentionConfig, attention_entropy_stats, attention_forward,
                                       build_gsm_mask, build_neighbor_mask)
from shortcutbreaker.autodiff import Graph, Tensor
from shortcutbreaker.exceptions import ConfigError, ContractError
from shortcutbreaker.probes import gaussian_peak_logits

from oracles import central_difference, rel_err


def qkv(rng, b=2, h=2, n=5, dk=3):
    return [rng.standard_normal((b, h, n, dk)) for _ in range(3)]


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        AttentionConfig(variant="sigmoid", neighbor_mask_radius=1)
    assert AttentionConfig(d_model=64, n_heads=4).d_k == 16


def test_sigmoid_zero_scores_output():
    rng = np.random.default_rng(0)
    n, dk = 6, 4
    v = rng.standard_normal((1, 1, n, dk))
    zeros = Tensor(np.zeros((1, 1, n, dk)))
    for mode, factor in (("none", n), ("divide_by_n", 1)):
        cfg = AttentionConfig(d_model=4, n_heads=1, variant="sigmoid", output_scale_mode=mode)
        out = attention_forward(zeros, zeros, Tensor(v), cfg, training=False).data
        expected = 0.5 * v.mean(axis=2, keepdims=True) * factor
        np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), rtol=1e-12)


def test_softmax_uniform_hand_case():
    q = k = Tensor(np.array([[[[1.0], [1.0]]]]))
    v = Tensor(np.array([[[[3.0], [5.0]]]]))
    cfg = AttentionConfig(d_model=1, n_heads=1, variant="softmax")
    out = attention_forward(q, k, v, cfg, training=False).data
    np.testing.assert_allclose(out.reshape(-1), [4.0, 4.0], rtol=1e-15)


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
@pytest.mark.parametrize("training", [True, False])
def test_self_mask_zero_diagonal(variant, training):
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(a) for a in qkv(rng, n=8))
    cfg = AttentionConfig(d_model=6, n_heads=2, variant=variant, self_mask=True, attn_dropout_rate=0.3)
    _, amap = attention_forward(q, k, v, cfg, training, np.random.default_rng(2), return_map=True)
    diag = np.diagonal(amap.data, axis1=-2, axis2=-1)
    assert np.all(diag == 0.0)


def test_softmax_rows_sum_to_one_unmasked():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(a * 4) for a in qkv(rng, n=9))
    cfg = AttentionConfig(d_model=6, n_heads=2, variant="softmax")
    _, amap = attention_forward(q, k, v, cfg, False, return_map=True)
    assert np.all(np.abs(amap.data.sum(-1) - 1.0) <= 1e-12)


def test_softmax_masked_rows_renormalize():
    rng = np.random.default_rng(4)
    q, k, v = (Tensor(a) for a in qkv(rng, n=6))
    cfg = AttentionConfig(d_model=6, n_heads=2, variant="softmax", self_mask=True)
    _, amap = attention_forward(q, k, v, cfg, False, return_map=True)
    assert np.all(np.abs(amap.data.sum(-1) - 1.0) <= 1e-12)


def test_self_mask_needs_two_tokens():
    x = Tensor(np.ones((1, 1, 1, 2)))
    cfg = AttentionConfig(d_model=2, n_heads=1, self_mask=True)
    with pytest.raises(ContractError):
        attention_forward(x, x, x, cfg, False)


def test_gsm_mask_examples():
    keep = build_gsm_mask(4, True, 0.0, True, np.random.default_rng(0)).keep
    np.testing.assert_array_equal(~keep, np.eye(4, dtype=bool))
    keep = build_gsm_mask(4, True, 0.9, False, None).keep
    np.testing.assert_array_equal(~keep, np.eye(4, dtype=bool))


def test_gsm_mask_rate():
    rng = np.random.default_rng(5)
    n = 64
    off = ~np.eye(n, dtype=bool)
    rates = [(~build_gsm_mask(n, True, 0.1, True, rng).keep)[off].mean() for _ in range(100)]
    assert abs(np.mean(rates) - 0.1) <= 0.02


def test_neighbor_mask_examples():
    keep = build_neighbor_mask(3, 4, 0).keep
    np.testing.assert_array_equal(~keep, np.eye(12, dtype=bool))
    with pytest.raises(ContractError):
        build_neighbor_mask(3, 3, 1)
    keep = build_neighbor_mask(4, 4, 1).keep
    masked = {divmod(int(j), 4) for j in np.flatnonzero(~keep[0])}
    assert masked == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_neighbor_mask_enumeration():
    h, w, r = 5, 6, 1
    keep = build_neighbor_mask(h, w, r).keep
    for i in range(h * w):
        for j in range(h * w):
            (ri, ci), (rj, cj) = divmod(i, w), divmod(j, w)
            assert keep[i, j] == (max(abs(ri - rj), abs(ci - cj)) > r)


def test_entropy_stats_examples():
    n = 7
    s = attention_entropy_stats(np.ones((n, n)))
    assert abs(s["mean_row_entropy"] - math.log(n)) < 1e-12
    assert abs(s["max_row_mass"] - 1 / n) < 1e-12
    s = attention_entropy_stats(np.eye(n))
    assert s["mean_row_entropy"] == 0.0 and s["max_row_mass"] == 1.0
    m = np.ones((3, 3))
    m[1] = 0.0
    assert attention_entropy_stats(m)["excluded_rows"] == 1


def test_sigmoid_spreads_more_than_softmax_on_peak():
    logits = gaussian_peak_logits((16, 16), 5.0, 2.0, np.random.default_rng(0))
    soft = ad.softmax_lastaxis(Tensor(logits)).data
    sig = ad.sigmoid(Tensor(logits)).data
    assert (attention_entropy_stats(sig)["mean_row_entropy"]
            > attention_entropy_stats(soft)["mean_row_entropy"])


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
@pytest.mark.parametrize("masked", [False, True])
def test_attention_gradient(variant, masked):
    rng = np.random.default_rng(6)
    arrays = qkv(rng, b=1, h=2, n=5, dk=2)
    proj = rng.standard_normal((1, 2, 5, 2))
    cfg = AttentionConfig(d_model=4, n_heads=2, variant=variant, self_mask=masked,
                          attn_dropout_rate=0.2 if masked else 0.0)

    def run(*xs):
        return attention_forward(*xs, cfg, True, np.random.default_rng(7))

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph():
        ad.sum(run(*ts) * proj).backward()
    for i, a in enumerate(arrays):
        def f(x, i=i):
            xs = [Tensor(x if j == i else arrays[j]) for j in range(3)]
            return float((run(*xs).data * proj).sum())
        assert rel_err(ts[i].grad, central_difference(f, a)) < 1e-4


@pytest.mark.parametrize("variant", ["softmax", "sigmoid"])
def test_batch_independence(variant):
    rng = np.random.default_rng(8)
    q, k, v = qkv(rng, b=3, n=6)
    cfg = AttentionConfig(d_model=6, n_heads=2, variant=variant, self_mask=True)
    full = attention_forward(Tensor(q), Tensor(k), Tensor(v), cfg, False).data
    for i in range(3):
        single = attention_forward(Tensor(q[i:i + 1]), Tensor(k[i:i + 1]), Tensor(v[i:i + 1]),
                                   cfg, False).data
        np.testing.assert_array_equal(single[0], full[i])
