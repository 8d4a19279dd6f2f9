import numpy as np
import pytest

from shortcutbreaker.autodiff import Graph, Tensor
from shortcutbreaker.exceptions import ConfigError, DimensionError, VersionError
from shortcutbreaker.model import (ModelConfig, load_checkpoint, model_forward, parameter_init,
                                   save_checkpoint, sinusoidal_2d, trunc_normal)
from shortcutbreaker.rng import make_rng
from shortcutbreaker.training import hard_mining_cosine_loss

from oracles import central_difference, rel_err

GRID = (4, 4)


def small_cfg(**kw):
    base = dict(d_model=8, n_heads=2, decoder_depth=2, depth_i=1)
    base.update(kw)
    return ModelConfig.build(**base)


def perturbed_params(cfg, seed):
    # move away from the zero-bias / unit-gain init so every path carries gradient
    params = parameter_init(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for t in params.values():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return params


def loss_fn(params, layers, cfg, keep, seed):
    out = model_forward(params, layers, GRID, cfg, True, make_rng(seed, "noise"))
    return hard_mining_cosine_loss(out["reconstructed"], out["target"], keep)


@pytest.mark.parametrize("kw", [
    {},
    {"variant": "softmax", "self_mask": False, "attn_dropout_rate": 0.0},
    {"bottleneck": "none"},
    {"bottleneck": "feature_jitter"},
    {"bottleneck": "dropout_only", "variant": "softmax", "neighbor_mask_radius": 1,
     "self_mask": False, "attn_dropout_rate": 0.0},
])
def test_full_model_gradient_directional(kw):
    cfg = small_cfg(**kw)
    for case in range(4):
        params = perturbed_params(cfg, case)
        rng = np.random.default_rng(case)
        layers = [rng.standard_normal((2, 16, 8)) for _ in range(2)]
        keep = 1.0 if case % 2 == 0 else 0.9
        for p in params.values():
            p.grad = None
        with Graph():
            loss_fn(params, layers, cfg, keep, case).backward()
        names = sorted(params)
        direction = {n: rng.standard_normal(params[n].shape) for n in names}
        analytic = sum(float((params[n].grad * direction[n]).sum()) for n in names)
        base = {n: params[n].data.copy() for n in names}

        def along(t):
            for n in names:
                params[n].data = base[n] + t * direction[n]
            return loss_fn(params, layers, cfg, keep, case).item()

        numeric = central_difference(lambda t: along(float(t)), np.array(0.0), h=1e-5)
        along(0.0)
        assert rel_err(analytic, numeric) < 1e-4


def test_full_model_gradient_elementwise():
    cfg = small_cfg(decoder_depth=1)
    params = perturbed_params(cfg, 7)
    rng = np.random.default_rng(7)
    layers = [rng.standard_normal((1, 16, 8)) for _ in range(2)]
    with Graph():
        loss_fn(params, layers, cfg, 1.0, 7).backward()
    for name in ("decoder.0.wq", "decoder.0.b1", "decoder.0.ln2_g", "lrnb.down0.w", "lrnb.up0.ln_b"):
        p = params[name]
        grad = p.grad.copy()
        base = p.data.copy()

        def f(x):
            p.data = x
            return loss_fn(params, layers, cfg, 1.0, 7).item()

        numeric = central_difference(f, base)
        p.data = base
        assert rel_err(grad, numeric) < 1e-4, name


def test_target_receives_no_gradient():
    cfg = small_cfg()
    params = parameter_init(cfg, 0)
    layers = [Tensor(np.random.default_rng(0).standard_normal((1, 16, 8)), requires_grad=True)]
    with Graph():
        out = model_forward(params, [layers[0].data], GRID, cfg, True, make_rng(0))
        assert not out["target"].requires_grad
        hard_mining_cosine_loss(out["reconstructed"], out["target"]).backward()
    assert layers[0].grad is None


def test_init_statistics():
    w = trunc_normal(np.random.default_rng(0), (200, 200))
    assert np.abs(w).max() <= 0.06
    # truncation at 3 sigma shrinks the std by ~1.3%
    assert abs(w.std() / 0.02 - 0.9866) < 0.01
    params = parameter_init(small_cfg(), 0)
    assert np.all(params["decoder.0.ln1_g"].data == 1.0)
    assert np.all(params["decoder.1.bq"].data == 0.0)
    a, b = parameter_init(small_cfg(), 3), parameter_init(small_cfg(), 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_positional_table():
    table = sinusoidal_2d((4, 6), 16)
    assert table.shape == (24, 16)
    assert len({tuple(r) for r in np.round(table, 12)}) == 24


def test_forward_shapes_and_errors():
    cfg = small_cfg()
    params = parameter_init(cfg, 0)
    layers = [np.zeros((3, 16, 8)) + 0.1]
    out = model_forward(params, layers, GRID, cfg, False, return_maps=True)
    assert out["reconstructed"].shape == (3, 16, 8)
    assert len(out["attention_maps"]) == 2
    assert np.all(np.diagonal(out["attention_maps"][0], axis1=-2, axis2=-1) == 0.0)
    with pytest.raises(DimensionError):
        model_forward(params, layers, (3, 5), cfg, False)
    with pytest.raises(DimensionError):
        model_forward(params, [np.zeros((1, 16, 4))], GRID, cfg, False)
    deep = small_cfg(depth_i=3)
    with pytest.raises(DimensionError):
        model_forward(parameter_init(deep, 0), [np.zeros((1, 12, 8))], (3, 4), deep, False)


def test_inference_is_deterministic():
    cfg = small_cfg()
    params = parameter_init(cfg, 1)
    layers = [np.random.default_rng(1).standard_normal((2, 16, 8))]
    a = model_forward(params, layers, GRID, cfg, False, make_rng(1))["reconstructed"].data
    b = model_forward(params, layers, GRID, cfg, False, make_rng(2))["reconstructed"].data
    assert np.array_equal(a, b)


def test_config_roundtrip_and_strictness():
    cfg = small_cfg(variant="softmax", self_mask=False, attn_dropout_rate=0.0, neighbor_mask_radius=1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 8, "n_heads": 2, "bogus": 1})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"version": 99})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"attention": {"typo": 1}})


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_cfg()
    params = perturbed_params(cfg, 2)
    save_checkpoint(tmp_path / "m.sbm", params, cfg, {"step": 5})
    back, cfg2, extra = load_checkpoint(tmp_path / "m.sbm")
    assert cfg2 == cfg and extra == {"step": 5}
    assert all(np.array_equal(params[k].data, back[k].data) for k in params)
    with pytest.raises(VersionError):
        (tmp_path / "x.sbm").write_bytes(b"SBK1" + (tmp_path / "m.sbm").read_bytes()[4:])
        load_checkpoint(tmp_path / "x.sbm")
