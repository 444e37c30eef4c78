import numpy as np
import pytest

from fredet.subspace import (
    BundleFormatError,
    BundleVersionError,
    DegenerateDataError,
    ModelBundle,
    SubspaceModel,
    fit,
    load_bundle,
    reconstruct,
    save_bundle,
    transform,
)
from fredet.tensor import FeatureBatch


def two_point_batch():
    return FeatureBatch("l", np.array([[2.0, 0.0], [0.0, 2.0]], dtype=np.float32), (2, 1, 1))


def random_model(rng, m_rows=12, d=20, threshold=0.999):
    mat = rng.standard_normal((m_rows, d)).astype(np.float32)
    return fit(FeatureBatch("r", mat, (d, 1, 1)), variance_threshold=threshold), mat


def manifold_batch(rng, m_rows=50, d=200, k=5, scales=(5, 4, 3, 2, 1)):
    """Rows on a known k-dim affine manifold; returns (batch, mean, basis)."""
    basis, _ = np.linalg.qr(rng.standard_normal((d, k)))
    basis = (basis * np.asarray(scales)).T  # k x d rows with distinct scales
    mean = rng.standard_normal(d)
    coords = rng.standard_normal((m_rows, k))
    rows = (mean + coords @ basis).astype(np.float32)
    return FeatureBatch("m", rows, (d, 1, 1)), mean, basis


# --- fit --------------------------------------------------------------------


def test_fit_two_points_closed_form():
    """2x2 case against the hand eigendecomposition: mean (1,1), m=1,
    component +-(1,-1)/sqrt(2), singular value 2."""
    model = fit(two_point_batch(), variance_threshold=0.995)
    assert np.allclose(model.mean, [1.0, 1.0], atol=1e-7)
    assert model.n_components == 1
    expected = np.array([1.0, -1.0]) / np.sqrt(2.0)
    assert np.allclose(np.abs(model.components[0]), np.abs(expected), atol=1e-6)
    assert model.components[0, 0] * model.components[0, 1] < 0  # opposite signs
    assert np.allclose(model.singular_values, [2.0], atol=1e-6)


def test_fit_two_points_threshold_one_same_rank():
    a = fit(two_point_batch(), variance_threshold=0.995)
    b = fit(two_point_batch(), variance_threshold=1.0)
    assert b.n_components == a.n_components == 1
    assert np.allclose(a.components, b.components)


def test_fit_recovers_manifold_rank():
    rng = np.random.default_rng(42)
    batch, _, _ = manifold_batch(rng)
    model = fit(batch, variance_threshold=0.999)
    assert model.n_components == 5
    # training rows reconstruct through the subspace
    rel_errs = []
    for row in batch.matrix:
        rec = reconstruct(model, transform(model, row.astype(np.float64)))
        rel_errs.append(np.linalg.norm(row - rec) / np.linalg.norm(row))
    assert max(rel_errs) <= 1e-4


def test_fit_rejects_identical_rows():
    batch = FeatureBatch("z", np.ones((4, 6), dtype=np.float32), (6, 1, 1))
    with pytest.raises(DegenerateDataError):
        fit(batch)


def test_fit_rejects_bad_threshold():
    with pytest.raises(ValueError):
        fit(two_point_batch(), variance_threshold=0.0)
    with pytest.raises(ValueError):
        fit(two_point_batch(), variance_threshold=1.5)


def test_fit_threshold_monotone_component_count():
    rng = np.random.default_rng(3)
    mat = rng.standard_normal((20, 30)).astype(np.float32)
    batch = FeatureBatch("t", mat, (30, 1, 1))
    counts = [fit(batch, variance_threshold=t).n_components for t in (0.5, 0.9, 0.99, 1.0)]
    assert counts == sorted(counts)


def test_fit_deterministic():
    rng = np.random.default_rng(11)
    mat = rng.standard_normal((10, 40)).astype(np.float32)
    a = fit(FeatureBatch("d", mat, (40, 1, 1)))
    b = fit(FeatureBatch("d", mat, (40, 1, 1)))
    assert np.array_equal(a.components, b.components)
    assert np.array_equal(a.mean, b.mean)


def test_fit_gram_path_matches_thin_svd():
    """d > M goes through the Gram matrix; same subspace as direct SVD."""
    rng = np.random.default_rng(5)
    mat = rng.standard_normal((8, 50)).astype(np.float32)
    model = fit(FeatureBatch("g", mat, (50, 1, 1)), variance_threshold=1.0)
    xc = mat.astype(np.float64) - mat.astype(np.float64).mean(axis=0)
    _, s_ref, vt_ref = np.linalg.svd(xc, full_matrices=False)
    k = model.n_components
    assert np.allclose(model.singular_values, s_ref[:k], rtol=1e-5)
    # rows span the same subspace: |<v_i, v_ref_i>| = 1
    dots = np.abs(np.sum(model.components * vt_ref[:k], axis=1))
    assert np.allclose(dots, 1.0, atol=1e-5)


def test_fit_orthonormal_components():
    rng = np.random.default_rng(9)
    model, _ = random_model(rng, m_rows=16, d=64)
    gram = model.components @ model.components.T
    assert np.allclose(gram, np.eye(model.n_components), atol=1e-5)


# --- transform / reconstruct --------------------------------------------------


def test_transform_of_mean_is_zero():
    model = fit(two_point_batch())
    assert np.allclose(transform(model, model.mean), 0.0, atol=1e-7)


def test_transform_two_point_magnitude():
    model = fit(two_point_batch())
    z = transform(model, np.array([2.0, 0.0]))
    assert np.allclose(np.abs(z), [np.sqrt(2.0)], atol=1e-6)
    # consistent with the stored orientation
    assert np.allclose(z, model.components @ np.array([1.0, -1.0]), atol=1e-6)


def test_transform_affine_linearity():
    rng = np.random.default_rng(21)
    model, _ = random_model(rng)
    u, v = rng.standard_normal((2, model.dim))
    a, b = 0.7, -1.3
    combo = a * u + b * v + (1 - a - b) * model.mean
    lhs = transform(model, combo)
    rhs = a * transform(model, u) + b * transform(model, v)
    assert np.allclose(lhs, rhs, atol=1e-8)


def test_transform_dimension_mismatch():
    model = fit(two_point_batch())
    with pytest.raises(ValueError):
        transform(model, np.zeros(3))
    with pytest.raises(ValueError):
        reconstruct(model, np.zeros(5))


def test_reconstruct_zero_is_mean():
    model = fit(two_point_batch())
    assert np.allclose(reconstruct(model, np.zeros(model.n_components)), model.mean)


def test_reconstruct_idempotent_on_span():
    rng = np.random.default_rng(31)
    model, mat = random_model(rng, m_rows=10, d=6, threshold=1.0)  # d <= M: full span
    for row in mat:
        u = row.astype(np.float64)
        rec = reconstruct(model, transform(model, u))
        assert np.allclose(rec, u, atol=1e-4 * max(1.0, np.linalg.norm(u)))


def test_reconstruct_matches_least_squares_oracle():
    """Off-subspace inputs project orthogonally; checked against a
    normal-equations solve on random 20-dim cases."""
    rng = np.random.default_rng(17)
    for _ in range(10):
        model, _ = random_model(rng, m_rows=8, d=20, threshold=0.9)
        u = rng.standard_normal(20)
        rec = reconstruct(model, transform(model, u))
        c = model.components
        z_star = np.linalg.solve(c @ c.T, c @ (u - model.mean))
        oracle = c.T @ z_star + model.mean
        assert np.allclose(rec, oracle, atol=1e-8)


def test_projector_idempotence_and_residual_orthogonality():
    rng = np.random.default_rng(23)
    model, _ = random_model(rng, m_rows=14, d=40)
    u = rng.standard_normal(40)
    z1 = transform(model, u)
    z2 = transform(model, reconstruct(model, z1))
    assert np.allclose(z1, z2, rtol=1e-5, atol=1e-8)
    residual = u - reconstruct(model, z1)
    assert np.max(np.abs(model.components @ residual)) <= 1e-5 * max(1.0, np.linalg.norm(u))


# --- bundle persistence --------------------------------------------------------


def make_bundle(rng):
    models = {}
    for name in ("net/a", "net/b", "net/c"):
        model, _ = random_model(rng)
        models[name] = SubspaceModel(
            layer_id=name,
            feature_shape=model.feature_shape,
            mean=model.mean,
            components=model.components,
            singular_values=model.singular_values,
            variance_threshold=model.variance_threshold,
            retained_variance=model.retained_variance,
        )
    return ModelBundle(
        backbone="net",
        preprocess={"target": [256, 256], "mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5],
                    "interpolation": "bilinear"},
        models=models,
        fusion_layers=("net/a", "net/b", "net/c"),
        score_layer="net/b",
    )


def test_bundle_roundtrip_field_identical(tmp_path):
    rng = np.random.default_rng(2)
    bundle = make_bundle(rng)
    path = tmp_path / "m.freb"
    save_bundle(bundle, path)
    loaded = load_bundle(path)
    assert loaded.backbone == bundle.backbone
    assert loaded.preprocess == bundle.preprocess
    assert loaded.fusion_layers == bundle.fusion_layers
    assert loaded.score_layer == bundle.score_layer
    assert set(loaded.models) == set(bundle.models)
    for layer_id, model in bundle.models.items():
        other = loaded.models[layer_id]
        assert other.feature_shape == model.feature_shape
        assert np.array_equal(other.mean, model.mean)
        assert np.array_equal(other.components, model.components)
        assert np.array_equal(other.singular_values, model.singular_values)
        assert other.variance_threshold == model.variance_threshold
        assert other.retained_variance == model.retained_variance


def test_bundle_version_error(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "v.freb"
    save_bundle(make_bundle(rng), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(BundleVersionError):
        load_bundle(path)


def test_bundle_truncation_error(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "t.freb"
    save_bundle(make_bundle(rng), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(BundleFormatError):
        load_bundle(path)


def test_bundle_payload_corruption_error(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "c.freb"
    save_bundle(make_bundle(rng), path)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0xFF  # flip payload bits under the CRC
    path.write_bytes(bytes(blob))
    with pytest.raises(BundleFormatError):
        load_bundle(path)


def test_bundle_fusion_layers_must_exist():
    rng = np.random.default_rng(6)
    model, _ = random_model(rng)
    with pytest.raises(ValueError):
        ModelBundle(
            backbone="x",
            preprocess={},
            models={"a": model},
            fusion_layers=("a", "missing"),
            score_layer="a",
        )
