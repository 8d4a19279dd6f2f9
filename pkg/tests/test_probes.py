import numpy as np
import pytest

from shortcutbreaker import autodiff as ad
from shortcutbreaker.attention import attention_entropy_stats
from shortcutbreaker.autodiff import Tensor
from shortcutbreaker.exceptions import ParameterError
from shortcutbreaker.model import ModelConfig
from shortcutbreaker.probes import (COMPONENT_GRID, FULL_CONFIG, ablation_grid,
                                    attention_spread_probe, gaussian_peak_logits, identity_probe,
                                    jacobian_forward_difference, jacobian_reverse, model_config_for,
                                    numerical_rank, rank_probe)
from shortcutbreaker.synthetic import SyntheticSpec
from shortcutbreaker.training import TrainConfig

from oracles import jacobian_fd

TINY_SPEC = SyntheticSpec(n_classes=2, grid=(4, 4), d_model=8, manifold_rank=2, n_train_per_class=4,
                          n_test_normal_per_class=2, n_test_anomalous_per_class=2)
TINY_TRAIN = TrainConfig(total_steps=4, warmup_steps=1, batch_size=4, log_interval=2)
TINY_BASE = {"d_model": 8, "n_heads": 2, "decoder_depth": 1, "lrnb": {"depth_i": 1}}


def test_jacobians_match_column_oracle():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((6, 6))

    def f(t):
        return ad.gelu(t @ Tensor(w))

    x = rng.standard_normal(6)
    with ad.no_grad():
        fd = jacobian_forward_difference(lambda b: f(Tensor(b)).data, x)
    oracle = jacobian_fd(lambda v: f(Tensor(v[None])).data[0], x, central=True, h=1e-6)
    rev = jacobian_reverse(f, x, chunk=4)
    assert np.abs(rev - oracle).max() < 1e-8
    assert np.abs(fd - oracle).max() < 1e-5


def test_numerical_rank_controls():
    assert numerical_rank(np.array([1.0, 0.5, 1e-7])) == 2
    assert numerical_rank(np.zeros(3)) == 0


def test_rank_probe_controls():
    ident = rank_probe("identity", n_tokens=4, d=4, depth_i=1, n_inputs=1, n_param_draws=1)
    assert ident.max_rank == 16 and not ident.passed
    low = rank_probe("lowrank", n_tokens=4, d=4, k=5, n_inputs=1, n_param_draws=2)
    assert all(t.numerical_rank == 5 for t in low.trials) and low.passed


def test_rank_probe_lrnb_small(tmp_path):
    rep = rank_probe("lrnb", n_tokens=8, d=4, depth_i=1, n_inputs=2, n_param_draws=2, out_dir=tmp_path)
    assert rep.bound == 16 and rep.passed
    assert rep.max_tail_ratio < 1e-6
    assert rep.max_fd_reverse_gap < 1e-5
    for name in ("config.json", "results.csv", "curves/singular_values.csv"):
        assert (tmp_path / name).is_file()


def test_rank_probe_refuses_large():
    with pytest.raises(ParameterError):
        rank_probe("identity", n_tokens=64, d=65)


def test_peak_logits():
    logits = gaussian_peak_logits((5, 6), 3.0, 1.0, np.random.default_rng(0))
    assert logits.shape == (30, 30)
    assert np.allclose(logits.max(axis=1), 3.0)
    flat = gaussian_peak_logits((4, 4), 0.0, 2.0, np.random.default_rng(0))
    soft = attention_entropy_stats(ad.softmax_lastaxis(Tensor(flat)).data)["mean_row_entropy"]
    sig = attention_entropy_stats(ad.sigmoid(Tensor(flat)).data)["mean_row_entropy"]
    assert abs(soft - np.log(16)) < 1e-12 and abs(sig - soft) < 1e-12


def test_softmax_peak_mass_monotone_in_height():
    masses = [attention_spread_probe(peak_height=p, n_trials=5).softmax_max_row_mass.mean()
              for p in (1, 3, 5, 7)]
    assert all(a < b for a, b in zip(masses, masses[1:]))


def test_attention_spread_probe_writes_panels(tmp_path):
    rep = attention_spread_probe(n_trials=10, out_dir=tmp_path)
    assert rep.entropy_wins == 10 and rep.mass_wins == 10
    panels = sorted(p.name for p in (tmp_path / "curves").iterdir())
    assert len(panels) == 6


def test_model_config_for_flags():
    full = model_config_for("lrnb", True, True, TINY_BASE)
    assert full.attention.variant == "sigmoid" and full.attention.self_mask
    assert full.attention.attn_dropout_rate == 0.1 and full.decoder_depth == 1
    base = model_config_for("none", False, False)
    assert base.attention.variant == "softmax" and not base.attention.self_mask
    assert base.bottleneck.kind == "none"
    nma = model_config_for("lrnb", False, False, None, 1)
    assert nma.attention.neighbor_mask_radius == 1
    assert ModelConfig.from_dict(full.to_dict()) == full


def test_identity_probe_small(tmp_path):
    res = identity_probe(["none", "lrnb"], TINY_SPEC, TINY_TRAIN, TINY_BASE, seeds=(0,),
                         out_dir=tmp_path)
    assert [r.variant for r in res] == ["none", "lrnb"]
    for r in res:
        assert len(r.loss_curve) == TINY_TRAIN.total_steps // TINY_TRAIN.log_interval
        assert r.mean_normal_score >= 0
        assert r.gap_ratio == pytest.approx(r.mean_abnormal_score / r.mean_normal_score)
    with pytest.raises(ParameterError):
        identity_probe(["bogus"], TINY_SPEC, TINY_TRAIN)


def test_ablation_grid_shape_and_sharing(tmp_path):
    rep = ablation_grid(TINY_SPEC, TINY_TRAIN, seeds=(0,), model_base=TINY_BASE,
                        tables=("components", "decoders"), out_dir=tmp_path)
    rows = rep.table("components")
    assert [r[0] for r in rows] == [c[0] for c in COMPONENT_GRID]
    # identical configs are trained once and shared
    assert rep.runs[("components", FULL_CONFIG)] is not None
    assert (rep.runs[("components", FULL_CONFIG)][0].metrics
            == rep.runs[("decoders", "gpa")][0].metrics)
    assert (tmp_path / "decoders.csv").is_file() and (tmp_path / "runs.csv").is_file()


def test_probes_are_reproducible(tmp_path):
    for name in ("a", "b"):
        identity_probe(["none"], TINY_SPEC, TINY_TRAIN, TINY_BASE, out_dir=tmp_path / name)
        rank_probe("lrnb", n_tokens=4, d=4, depth_i=1, n_inputs=1, n_param_draws=1,
                   out_dir=tmp_path / name / "rank")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
