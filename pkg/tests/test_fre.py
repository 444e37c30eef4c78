import numpy as np
import pytest

from fredet.fre import (
    FUSE_EPS,
    fre_map,
    fre_score,
    fre_vector,
    fuse_maps,
    resize_map,
    score_image,
)
from fredet.metrics import auroc
from fredet.subspace import fit
from fredet.tensor import AnomalyMap, FeatureBatch, FeatureTensor, devectorize

from synth import SyntheticLayer, fit_layer_bundle


def two_point_model():
    batch = FeatureBatch("l", np.array([[2.0, 0.0], [0.0, 2.0]], dtype=np.float32), (2, 1, 1))
    return fit(batch)


# --- fre_vector / fre_score ---------------------------------------------------


def test_fre_vector_hand_case():
    """u=(3,3) on the (2,0)/(0,2) model: centered (2,2) is orthogonal to the
    component, reconstruction falls back to the mean, e=(2,2)."""
    model = two_point_model()
    u = devectorize(np.array([3.0, 3.0], dtype=np.float32), (2, 1, 1), "l")
    e = fre_vector(model, u)
    assert np.allclose(e, [2.0, 2.0], atol=1e-6)
    assert abs(fre_score(e) - 2.0 * np.sqrt(2.0)) <= 1e-6


def test_fre_vector_zero_on_training_sample():
    rng = np.random.default_rng(0)
    mat = rng.standard_normal((6, 12)).astype(np.float32)
    model = fit(FeatureBatch("t", mat, (12, 1, 1)), variance_threshold=1.0)
    u = devectorize(mat[3], (12, 1, 1), "t")
    e = fre_vector(model, u)
    assert fre_score(e) <= 1e-4 * np.linalg.norm(mat[3])


def test_fre_vector_shape_mismatch():
    model = two_point_model()
    with pytest.raises(ValueError):
        fre_vector(model, FeatureTensor("l", np.zeros((3, 1, 1), dtype=np.float32)))


def test_fre_vector_invariant_to_in_subspace_shift():
    rng = np.random.default_rng(1)
    mat = rng.standard_normal((10, 24)).astype(np.float32)
    model = fit(FeatureBatch("s", mat, (24, 1, 1)), variance_threshold=0.9)
    u = rng.standard_normal(24)
    z = rng.standard_normal(model.n_components)
    shifted = u + model.components.T @ z
    e1 = fre_vector(model, devectorize(u.astype(np.float32), (24, 1, 1)))
    e2 = fre_vector(model, devectorize(shifted.astype(np.float32), (24, 1, 1)))
    assert np.allclose(e1, e2, atol=1e-4)


def test_fre_score_basics():
    assert fre_score(np.zeros(5)) == 0.0
    assert abs(fre_score(np.array([2.0, 2.0])) - 2.0 * np.sqrt(2.0)) < 1e-12
    assert fre_score(np.array([3.0, 4.0, 0.0, 0.0])) == 5.0


def test_fre_score_squared_equals_elementwise_sum():
    rng = np.random.default_rng(2)
    e = rng.standard_normal(4 * 3 * 3)
    assert np.isclose(fre_score(e) ** 2, np.sum(e.reshape(4, 3, 3) ** 2), rtol=1e-12)


# --- fre_map ------------------------------------------------------------------


def test_fre_map_channel_mean():
    e = np.zeros((3, 2, 2))
    e[:, 0, 1] = [1.0, 2.0, 3.0]
    m = fre_map(e.ravel(), (3, 2, 2))
    assert m.data[0, 1] == pytest.approx(2.0)
    assert m.data[0, 0] == 0.0


def test_fre_map_zero():
    m = fre_map(np.zeros(8), (2, 2, 2))
    assert not m.data.any()


def test_fre_map_matches_loop_oracle():
    rng = np.random.default_rng(3)
    c, h, w = 4, 5, 6
    e = rng.standard_normal(c * h * w)
    m = fre_map(e, (c, h, w))
    grid = e.reshape(c, h, w)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                acc += abs(grid[ch, i, j])
            # maps store float32; oracle agrees at that precision exactly
            assert m.data[i, j] == np.float32(acc / c)


def test_fre_map_signed_option():
    e = np.array([[[1.0]], [[-1.0]]])  # cancels under signed averaging
    assert fre_map(e.ravel(), (2, 1, 1), signed=True).data[0, 0] == pytest.approx(0.0)
    assert fre_map(e.ravel(), (2, 1, 1)).data[0, 0] == pytest.approx(1.0)


def test_fre_map_length_mismatch():
    with pytest.raises(ValueError):
        fre_map(np.zeros(7), (2, 2, 2))


# --- resize_map -----------------------------------------------------------------


def bilinear_oracle(src, out_h, out_w):
    """Independent per-pixel bilinear, half-pixel centers, weight form."""
    src = np.asarray(src, dtype=np.float64)
    sh, sw = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * sh / out_h - 0.5, 0.0), sh - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, sh - 1)
        wy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * sw / out_w - 0.5, 0.0), sw - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, sw - 1)
            wx = sx - x0
            out[i, j] = (
                src[y0, x0] * (1 - wy) * (1 - wx)
                + src[y0, x1] * (1 - wy) * wx
                + src[y1, x0] * wy * (1 - wx)
                + src[y1, x1] * wy * wx
            )
    return out


def test_resize_constant_extension():
    m = AnomalyMap(np.array([[7.5]], dtype=np.float32))
    out = resize_map(m, (4, 6))
    assert out.resolution == "input"
    assert np.array_equal(out.data, np.full((4, 6), 7.5, dtype=np.float32))


def test_resize_identity():
    rng = np.random.default_rng(4)
    data = rng.random((5, 7)).astype(np.float32)
    out = resize_map(AnomalyMap(data), (5, 7))
    assert np.array_equal(out.data, data)


def test_resize_matches_oracle():
    src = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    out = resize_map(AnomalyMap(src), (4, 4))
    assert np.allclose(out.data, bilinear_oracle(src, 4, 4), atol=1e-6)


def test_resize_matches_oracle_random():
    rng = np.random.default_rng(5)
    src = rng.random((3, 5)).astype(np.float32)
    for target in ((7, 9), (2, 3), (10, 4)):
        out = resize_map(AnomalyMap(src), target)
        assert np.allclose(out.data, bilinear_oracle(src, *target), atol=1e-6)


def test_resize_preserves_constants_exactly():
    m = AnomalyMap(np.full((3, 3), 0.3, dtype=np.float32))
    out = resize_map(m, (8, 5))
    assert np.all(out.data == np.float32(0.3))


def test_resize_respects_bounds():
    rng = np.random.default_rng(6)
    src = rng.random((4, 4)).astype(np.float32)
    out = resize_map(AnomalyMap(src), (11, 13)).data
    assert out.min() >= src.min() - 1e-12
    assert out.max() <= src.max() + 1e-12


def test_resize_nearest_mode():
    src = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)
    out = resize_map(AnomalyMap(src), (4, 4), mode="nearest")
    assert set(np.unique(out.data)) <= {0.0, 1.0, 2.0, 3.0}


# --- fuse_maps ------------------------------------------------------------------


def const_map(v, shape=(4, 4)):
    return AnomalyMap(np.full(shape, v, dtype=np.float32), resolution="input")


def test_fuse_constant_geometric_mean():
    fused = fuse_maps([const_map(1.0), const_map(8.0), const_map(27.0)])
    assert np.allclose(fused.map.data, 6.0, rtol=1e-9)


def test_fuse_single_map_identity():
    rng = np.random.default_rng(7)
    data = rng.random((3, 3)).astype(np.float32)
    fused = fuse_maps([AnomalyMap(data, resolution="input")])
    assert np.allclose(fused.map.data, data, atol=1e-9)


def test_fuse_matches_log_domain_oracle():
    rng = np.random.default_rng(8)
    maps = [AnomalyMap(rng.random((6, 6)).astype(np.float32), resolution="input")
            for _ in range(3)]
    fused = fuse_maps(maps)
    stack = np.stack([m.data.astype(np.float64) for m in maps])
    oracle = np.exp(np.mean(np.log(stack + FUSE_EPS), axis=0)) - FUSE_EPS
    assert np.allclose(fused.map.data, oracle, rtol=1e-6)


def test_fuse_permutation_invariant():
    rng = np.random.default_rng(9)
    maps = [AnomalyMap(rng.random((4, 4)).astype(np.float32)) for _ in range(3)]
    a = fuse_maps(maps).map.data
    b = fuse_maps(maps[::-1]).map.data
    assert np.allclose(a, b, rtol=1e-12)


def test_fuse_idempotent_on_identical_inputs():
    rng = np.random.default_rng(10)
    m = AnomalyMap(rng.random((5, 5)).astype(np.float32))
    fused = fuse_maps([m, m, m])
    assert np.allclose(fused.map.data, m.data, atol=1e-9)


def test_fuse_zero_pixel_does_not_annihilate():
    a = np.full((2, 2), 4.0, dtype=np.float32)
    a[0, 0] = 0.0
    fused = fuse_maps([AnomalyMap(a), const_map(4.0, (2, 2)), const_map(4.0, (2, 2))])
    assert fused.map.data[0, 0] < 1e-3  # zero stays effectively zero
    assert fused.map.data[1, 1] == pytest.approx(4.0, rel=1e-6)


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse_maps([])
    with pytest.raises(ValueError):
        fuse_maps([const_map(1.0, (2, 2)), const_map(1.0, (3, 3))])


# --- score_image ------------------------------------------------------------------


def test_score_image_training_sample_near_zero():
    rng = np.random.default_rng(11)
    layer = SyntheticLayer(rng, "net/mid", shape=(4, 8, 8), k=3)
    bundle, train = fit_layer_bundle(rng, [layer], n_train=16, variance_threshold=1.0)
    sample = train["net/mid"][0]
    score, fused = score_image(bundle, {"net/mid": sample}, (32, 32))
    scale = np.linalg.norm(sample.data)
    assert score <= 1e-4 * scale
    assert fused.map.data.max() <= 1e-4 * scale
    assert fused.map.shape == (32, 32)


def test_score_image_off_manifold_above_training_percentile():
    rng = np.random.default_rng(12)
    layers = [
        SyntheticLayer(rng, f"net/l{i}", shape=(4, 16, 16), k=5) for i in range(3)
    ]
    bundle, train = fit_layer_bundle(rng, layers, n_train=24)
    train_scores = []
    for i in range(24):
        feats = {l.layer_id: train[l.layer_id][i] for l in layers}
        s, _ = score_image(bundle, feats, (64, 64))
        train_scores.append(s)
    feats_anom = {l.layer_id: l.anomalous_feature((4, 4, 6)) for l in layers}
    s_anom, _ = score_image(bundle, feats_anom, (64, 64))
    assert s_anom > np.quantile(train_scores, 0.99)


def test_score_image_fusion_order_invariant():
    rng = np.random.default_rng(13)
    layers = [SyntheticLayer(rng, f"net/l{i}", shape=(2, 8, 8), k=2) for i in range(3)]
    bundle, _ = fit_layer_bundle(rng, layers, n_train=12)
    feats = {l.layer_id: l.anomalous_feature((2, 2, 3)) for l in layers}
    _, fused_fwd = score_image(bundle, feats, (16, 16))

    from fredet.subspace import ModelBundle

    reversed_bundle = ModelBundle(
        backbone=bundle.backbone,
        preprocess=bundle.preprocess,
        models=bundle.models,
        fusion_layers=tuple(reversed(bundle.fusion_layers)),
        score_layer=bundle.score_layer,
    )
    _, fused_rev = score_image(reversed_bundle, feats, (16, 16))
    assert np.allclose(fused_fwd.map.data, fused_rev.map.data, rtol=1e-12)


def test_score_image_missing_layer():
    rng = np.random.default_rng(14)
    layer = SyntheticLayer(rng, "net/only", shape=(2, 4, 4), k=2)
    bundle, _ = fit_layer_bundle(rng, [layer], n_train=8)
    with pytest.raises(KeyError):
        score_image(bundle, {}, (8, 8))


def test_score_image_optional_smoothing():
    rng = np.random.default_rng(16)
    layer = SyntheticLayer(rng, "net/s", shape=(4, 8, 8), k=3)
    bundle, _ = fit_layer_bundle(rng, [layer], n_train=12)
    feats = {"net/s": layer.anomalous_feature((2, 2, 2))}
    score_raw, fused_raw = score_image(bundle, feats, (16, 16))
    score_smooth, fused_smooth = score_image(bundle, feats, (16, 16), smooth_sigma=2.0)
    assert score_smooth == score_raw  # smoothing touches the map only
    assert fused_smooth.map.data.max() < fused_raw.map.data.max()
    assert not np.allclose(fused_smooth.map.data, fused_raw.map.data)


def test_monotone_threshold_auroc_under_noise():
    """In-span + noise sigma vs off-span stays separable for sigma <= 0.01."""
    rng = np.random.default_rng(15)
    layer = SyntheticLayer(rng, "net/m", shape=(4, 8, 8), k=5)
    bundle, _ = fit_layer_bundle(rng, [layer], n_train=32)
    for sigma in (0.0, 0.01):
        scores, labels = [], []
        for _ in range(40):
            f = layer.normal_feature(noise=sigma)
            s, _ = score_image(bundle, {"net/m": f}, (16, 16))
            scores.append(s)
            labels.append(0)
        for _ in range(40):
            f = layer.anomalous_feature((2, 2, 4))
            s, _ = score_image(bundle, {"net/m": f}, (16, 16))
            scores.append(s)
            labels.append(1)
        assert auroc(scores, labels) >= 0.99
