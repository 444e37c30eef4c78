"""Anomaly detection and segmentation from deep-feature reconstruction error.

Fit truncated-PCA subspaces to defect-free deep features, score test
inputs by the l2 norm of the reconstruction residual, and localize
defects with channel-averaged residual heatmaps fused across layers.
"""

from .backbone import Backbone, BackboneSpec, FeatureDirectory, load_backbone
from .dataset import PreprocessConfig, Sample, preprocess, preprocess_mask, scan_dataset
from .fre import (
    FreResult,
    FusedMap,
    compute_fre,
    fre_map,
    fre_score,
    fre_vector,
    fuse_maps,
    resize_map,
    score_image,
)
from .metrics import EvalRecord, ProCurve, auroc, evaluate, pixel_auroc, pro
from .subspace import (
    ModelBundle,
    SubspaceModel,
    fit,
    load_bundle,
    reconstruct,
    save_bundle,
    transform,
)
from .tensor import (
    AnomalyMap,
    FeatureBatch,
    FeatureTensor,
    devectorize,
    load_npy,
    load_npy_array,
    save_npy,
    vectorize,
)

__version__ = "0.1.0"
