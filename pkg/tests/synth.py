"""Synthetic feature factories: known low-rank manifolds with localized
off-manifold perturbations, for end-to-end checks without any backbone."""

from __future__ import annotations

import numpy as np

from fredet.subspace import ModelBundle, fit
from fredet.tensor import FeatureBatch, FeatureTensor


class SyntheticLayer:
    """Features on a k-dim affine manifold inside a (C, H, W) grid."""

    def __init__(self, rng, layer_id, shape=(8, 16, 16), k=5, scale=10.0):
        self.layer_id = layer_id
        self.shape = shape
        d = int(np.prod(shape))
        basis, _ = np.linalg.qr(rng.standard_normal((d, k)))
        self.basis = basis.T * scale          # k x d
        self.mean = rng.standard_normal(d)
        self.rng = rng
        self.k = k

    def normal_feature(self, noise=0.0) -> FeatureTensor:
        d = self.basis.shape[1]
        coords = self.rng.standard_normal(self.k)
        v = self.mean + coords @ self.basis
        if noise > 0:
            v = v + noise * np.linalg.norm(self.basis) * self.rng.standard_normal(d)
        return FeatureTensor(self.layer_id, v.reshape(self.shape).astype(np.float32))

    def anomalous_feature(self, region, magnitude=30.0) -> FeatureTensor:
        """Normal feature plus a random bump confined to a spatial region.

        region = (y, x, size) in layer-grid coordinates, applied across all
        channels; almost surely off the k-dim span.
        """
        t = self.normal_feature().data.copy()
        y, x, s = region
        c = t.shape[0]
        t[:, y : y + s, x : x + s] += magnitude * self.rng.standard_normal((c, s, s)).astype(
            np.float32
        )
        return FeatureTensor(self.layer_id, t)


def fit_layer_bundle(rng, layers, n_train=32, variance_threshold=0.999,
                     score_layer=None, input_res=(64, 64)):
    """Fit one SubspaceModel per synthetic layer and wrap them in a bundle."""
    models = {}
    train_features = {l.layer_id: [] for l in layers}
    for _ in range(n_train):
        for layer in layers:
            train_features[layer.layer_id].append(layer.normal_feature())
    for layer in layers:
        batch = FeatureBatch.from_tensors(train_features[layer.layer_id])
        models[layer.layer_id] = fit(batch, variance_threshold=variance_threshold)
    ids = [l.layer_id for l in layers]
    bundle = ModelBundle(
        backbone="synthetic",
        preprocess={"target": list(input_res), "mean": [0.0] * 3, "std": [1.0] * 3,
                    "interpolation": "bilinear"},
        models=models,
        fusion_layers=tuple(ids),
        score_layer=score_layer or ids[len(ids) // 2],
    )
    return bundle, train_features
