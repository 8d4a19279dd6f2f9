import numpy as np
import pytest

from shortcutbreaker.exceptions import (ChecksumError, ConfigError, ContractError, TruncatedError,
                                        VersionError)
from shortcutbreaker.rng import make_rng
from shortcutbreaker.synthetic import (ANOMALY_KINDS, KIND_CODES, SyntheticSpec, TokenBatch,
                                       _class_params, generate_normal, inject_anomaly, make_splits,
                                       off_manifold_vector, read_dataset, rectangle_shape,
                                       write_dataset)

SMALL = SyntheticSpec(n_classes=3, grid=(4, 4), d_model=8, manifold_rank=2,
                      n_train_per_class=2, n_test_normal_per_class=1, n_test_anomalous_per_class=2)


def test_degenerate_spec_gives_anchor_tokens():
    spec = SyntheticSpec(n_classes=2, grid=(4, 4), d_model=8, manifold_rank=0, normal_noise_std=0.0,
                         n_encoder_layers=1)
    batch = generate_normal(spec, 1, 3)
    params = _class_params(spec)
    anchor = (params.anchors[1] @ params.layer_maps[0] + params.layer_bias[0]).astype(np.float32)
    np.testing.assert_array_equal(batch.layers[0], np.broadcast_to(anchor, batch.layers[0].shape))


def test_rank0_interclass_cosine_matches_anchors():
    spec = SyntheticSpec(n_classes=2, grid=(2, 2), d_model=8, manifold_rank=0, normal_noise_std=0.0,
                         n_encoder_layers=1)
    a = generate_normal(spec, 0, 1).layers[0][0, 0]
    b = generate_normal(spec, 1, 1).layers[0][0, 0]
    p = _class_params(spec)
    ea = p.anchors[0] @ p.layer_maps[0] + p.layer_bias[0]
    eb = p.anchors[1] @ p.layer_maps[0] + p.layer_bias[0]
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert abs(cos - ea @ eb / np.linalg.norm(ea) / np.linalg.norm(eb)) < 1e-6


def test_generation_is_deterministic_and_order_free():
    a = generate_normal(SMALL, 2, 4)
    b = generate_normal(SMALL, 2, 4)
    for la, lb in zip(a.layers, b.layers):
        assert np.array_equal(la, lb)
    piecewise = TokenBatch.concatenate([generate_normal(SMALL, 2, 1, start_index=i) for i in range(4)])
    for la, lb in zip(a.layers, piecewise.layers):
        assert np.array_equal(la, lb)


def test_normal_batches_have_empty_masks():
    batch = generate_normal(SMALL, 0, 3)
    assert not batch.anomaly_mask.any()
    assert not batch.image_label.any()


def test_class_id_range():
    with pytest.raises(ContractError):
        generate_normal(SMALL, 3, 1)


def test_rectangle_area():
    h, w = rectangle_shape(0.1, (16, 16))
    assert abs(h * w - 25.6) <= 1.5
    assert max(h, w) / min(h, w) <= 3


@pytest.mark.parametrize("kind", ANOMALY_KINDS)
def test_inject_mask_label_consistency(kind):
    clean = generate_normal(SMALL, 1, 5)
    bad = inject_anomaly(clean, SMALL, make_rng(0, "t"), kinds=[kind])
    assert bad.image_label.all()
    assert (bad.kinds == KIND_CODES[kind]).all()
    for i in range(5):
        changed = np.abs(bad.layers[0][i] - clean.layers[0][i]).sum(-1) > 0
        assert not changed[~bad.anomaly_mask[i].reshape(-1)].any()
        rows, cols = np.nonzero(bad.anomaly_mask[i])
        area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        assert area == bad.anomaly_mask[i].sum()


def test_inject_area_fraction():
    spec = SyntheticSpec(grid=(16, 16), d_model=8, manifold_rank=2, anomaly_area_frac=(0.1, 0.1),
                         n_classes=2)
    bad = inject_anomaly(generate_normal(spec, 0, 20), spec, make_rng(1, "area"))
    counts = bad.anomaly_mask.reshape(20, -1).sum(1)
    assert np.all(np.abs(counts - 25.6) <= 1.5)


def test_off_manifold_vector_is_orthogonal():
    basis = _class_params(SMALL).bases[1]
    for s in range(10):
        v = off_manifold_vector(SMALL, 1, make_rng(s, "o"))
        assert np.all(np.abs(basis.T @ v) < 1e-10)
        assert abs(np.linalg.norm(v) - 3 * SMALL.field_scale) < 1e-12


def test_patch_swap_needs_two_classes():
    spec = SyntheticSpec(n_classes=1, grid=(4, 4), d_model=8, manifold_rank=2)
    with pytest.raises(ContractError):
        inject_anomaly(generate_normal(spec, 0, 1), spec, make_rng(0), kinds=["patch_swap"])


def test_inject_rejects_anomalous_batch():
    bad = inject_anomaly(generate_normal(SMALL, 0, 1), SMALL, make_rng(0))
    with pytest.raises(ContractError):
        inject_anomaly(bad, SMALL, make_rng(1))


@pytest.mark.parametrize("kind", ANOMALY_KINDS)
def test_anomalies_are_separable(kind):
    spec = SyntheticSpec()
    clean = generate_normal(spec, 0, 10, "sep")
    bad = inject_anomaly(clean, spec, make_rng(2, "sep"), kinds=[kind])
    sims = []
    for i in range(10):
        idx = np.flatnonzero(bad.anomaly_mask[i].reshape(-1))
        for layer_clean, layer_bad in zip(clean.layers, bad.layers):
            a, b = layer_bad[i, idx], layer_clean[i, idx]
            sims.extend((a * b).sum(-1) / np.linalg.norm(a, axis=-1) / np.linalg.norm(b, axis=-1))
    assert np.mean(sims) < 0.99


def test_spec_validation_lists_every_field():
    with pytest.raises(ConfigError) as err:
        SyntheticSpec.from_dict({"manifold_rank": 99, "anomaly_area_frac": [0.3, 0.9], "bogus": 1})
    assert any("bogus" in p for p in err.value.problems)
    with pytest.raises(ConfigError) as err:
        SyntheticSpec.from_dict({"manifold_rank": 99, "anomaly_area_frac": [0.3, 0.9]})
    assert len(err.value.problems) == 2


def test_splits():
    train, test = make_splits(SMALL)
    assert len(train) == 6 and not train.image_label.any()
    assert len(test) == 9 and test.image_label.sum() == 6


def test_dataset_roundtrip_bitwise(tmp_path):
    train, test = make_splits(SMALL)
    path = tmp_path / "d.sbk"
    write_dataset([train, test], path, SMALL)
    batches, spec = read_dataset(path)
    assert spec == SMALL
    for orig, back in zip([train, test], batches):
        for la, lb in zip(orig.layers, back.layers):
            assert np.array_equal(la, lb)
        assert np.array_equal(orig.anomaly_mask, back.anomaly_mask)
        assert np.array_equal(orig.class_ids, back.class_ids)
        assert np.array_equal(orig.kinds, back.kinds)


def test_empty_dataset(tmp_path):
    path = tmp_path / "e.sbk"
    write_dataset([], path)
    assert read_dataset(path) == ([], None)


def test_container_errors(tmp_path):
    train, _ = make_splits(SMALL)
    path = tmp_path / "d.sbk"
    write_dataset([train], path, SMALL)
    raw = bytearray(path.read_bytes())

    corrupt = bytearray(raw)
    corrupt[-10] ^= 0xFF
    (tmp_path / "c.sbk").write_bytes(bytes(corrupt))
    with pytest.raises(ChecksumError):
        read_dataset(tmp_path / "c.sbk")

    (tmp_path / "t.sbk").write_bytes(bytes(raw[:-100]))
    with pytest.raises(TruncatedError):
        read_dataset(tmp_path / "t.sbk")

    (tmp_path / "v.sbk").write_bytes(b"SBK9" + bytes(raw[4:]))
    with pytest.raises(VersionError):
        read_dataset(tmp_path / "v.sbk")
