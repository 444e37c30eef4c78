"""Command-line pipeline: extract, fit, score, eval, bench.

Configuration comes from an optional TOML file plus flags (flags win); the
resolved config is echoed into the output directory for provenance. Every
failure exits nonzero with a single JSON line on stderr:

    {"error": "<code>", "detail": "<message>"}
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import dataset as ds
from . import fre, metrics, subspace
from .backbone import (
    Backbone,
    BackboneError,
    FeatureDirectory,
    FeatureDirectoryWriter,
    load_backbone,
    sanitize_id,
)
from ._onnx import GraphExecutionError, OnnxParseError, UnsupportedOperatorError
from .subspace import BundleFormatError, DegenerateDataError, ModelBundle
from .tensor import FeatureBatch, NpyError


class CliError(Exception):
    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code


_ERROR_CODES = [
    (ds.EmptySplitError, "empty-split"),
    (ds.MissingMaskError, "missing-mask"),
    (ds.UnreadableFileError, "unreadable-file"),
    (ds.DatasetError, "dataset"),
    (NpyError, "npy-format"),
    (subspace.BundleVersionError, "bundle-version"),
    (BundleFormatError, "bundle-format"),
    (DegenerateDataError, "degenerate-data"),
    (UnsupportedOperatorError, "unsupported-operator"),
    (OnnxParseError, "onnx-format"),
    (GraphExecutionError, "graph-execution"),
    (BackboneError, "backbone"),
    (metrics.SingleClassError, "single-class"),
    (FileNotFoundError, "not-found"),
    (OSError, "io"),
    (KeyError, "missing-layer"),
    (ValueError, "invalid"),
]


def _error_code(exc: Exception) -> str:
    for etype, code in _ERROR_CODES:
        if isinstance(exc, etype):
            return code
    return "internal"


# ---------------------------------------------------------------------------
# config handling

_DEFAULTS = {
    "layout": "mvtec",
    "variance": 0.995,
    "split": "all",
    "warmup": 10,
    "iters": 100,
    "workers": 4,
    "heatmaps": False,
    "signed_maps": False,
    "normalize_maps": False,
    "any_layer_count": False,
    "fpr_limit": 0.3,
    "smooth_sigma": 0.0,
}


def _load_config(args: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, "rb") as f:
            file_cfg = tomllib.load(f)
        unknown = set(file_cfg) - set(_DEFAULTS) - {
            "dataset", "backbone", "features", "layers", "score_layer", "out", "image", "bundle",
        }
        if unknown:
            raise CliError("config", f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            cfg[key] = value
    if isinstance(cfg.get("layers"), str):
        cfg["layers"] = [l.strip() for l in cfg["layers"].split(",") if l.strip()]
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _echo_config(cfg: dict, out_dir: Path) -> None:
    lines = [f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.items()) if v is not None]
    (out_dir / "config.toml").write_text("\n".join(lines) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = cfg.get("out")
    if not out:
        raise CliError("config", "output directory required (--out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fusion_layers(cfg: dict, available: list[str]) -> list[str]:
    layers = cfg.get("layers") or available
    missing = [l for l in layers if l not in available]
    if missing:
        raise CliError("missing-layer", f"layers not provided by feature source: {missing}")
    if len(layers) not in (1, 3) and not cfg["any_layer_count"]:
        raise CliError(
            "config",
            f"fusion layer count must be 1 or 3 (got {len(layers)}); "
            "pass --any-layer-count to override",
        )
    return list(layers)


def _score_layer(cfg: dict, layers: list[str]) -> str:
    score_layer = cfg.get("score_layer") or layers[len(layers) // 2]
    if score_layer not in layers:
        raise CliError("config", f"score layer {score_layer!r} not among fusion layers {layers}")
    return score_layer


# ---------------------------------------------------------------------------
# feature sources

class _LiveSource:
    """Runs the backbone over dataset images on demand."""

    def __init__(self, cfg: dict, preprocess: ds.PreprocessConfig | None = None):
        self.backbone = load_backbone(cfg["backbone"])
        h, w = self.backbone.spec.input_shape[2:]
        if preprocess is None:
            preprocess = ds.PreprocessConfig(target=(h, w))
        elif tuple(preprocess.target) != (h, w):
            raise CliError(
                "config",
                f"preprocess target {preprocess.target} does not match backbone "
                f"input {(h, w)}",
            )
        self.preprocess = preprocess
        self.samples = ds.scan_dataset(cfg["dataset"], layout=cfg["layout"])
        self.layers = self.backbone.layer_ids
        self.input_resolution = (h, w)
        self.backbone_name = self.backbone.spec.backbone

    def entries(self, split):
        return [
            {
                "id": s.image_id,
                "split": s.split,
                "defect_type": s.defect_type,
                "label": s.label,
                "sample": s,
            }
            for s in self.samples
            if split is None or s.split == split
        ]

    def features_for(self, entry, layers=None):
        x = ds.preprocess(ds.load_rgb(entry["sample"].image_path), self.preprocess)
        feats = self.backbone.forward(x)
        return {l: feats[l] for l in (layers or self.layers)}

    def mask_for(self, entry):
        sample = entry["sample"]
        if sample.mask_path is None:
            return None
        return ds.preprocess_mask(ds.load_mask(sample.mask_path), self.preprocess.target)


def _feature_source(cfg: dict, preprocess: ds.PreprocessConfig | None = None):
    has_backbone = bool(cfg.get("backbone"))
    has_features = bool(cfg.get("features"))
    if has_backbone == has_features:
        raise CliError("config", "configure exactly one feature source: --backbone or --features")
    if has_features:
        source = FeatureDirectory(cfg["features"])
        if preprocess is not None and source.preprocess != preprocess:
            raise CliError(
                "config",
                "feature directory was extracted with different preprocessing than "
                "the bundle records; re-extract or use the matching bundle",
            )
        return source
    if not cfg.get("dataset"):
        raise CliError("config", "--backbone requires --dataset")
    return _LiveSource(cfg, preprocess=preprocess)


def _parallel_map(fn, items, workers: int):
    """Order-preserving parallel map; workers <= 1 stays sequential."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# commands

def cmd_extract(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    if not cfg.get("backbone") or not cfg.get("dataset"):
        raise CliError("config", "extract requires --backbone and --dataset")
    source = _LiveSource(cfg)
    split = None if cfg["split"] == "all" else cfg["split"]
    entries = source.entries(split)
    if not entries:
        raise CliError("empty-split", f"no images in split {cfg['split']!r}")
    writer = FeatureDirectoryWriter(
        out,
        backbone=source.backbone_name,
        layers=source.layers,
        preprocess=source.preprocess,
        input_resolution=source.input_resolution,
    )
    results = _parallel_map(
        lambda e: (e, source.features_for(e), source.mask_for(e)), entries, cfg["workers"]
    )
    for entry, feats, mask in results:
        writer.add_image(
            entry["id"],
            entry["split"],
            entry["defect_type"],
            feats,
            mask=mask,
            source=str(entry["sample"].image_path),
        )
    manifest = writer.finish()
    print(f"extracted {len(entries)} images x {len(source.layers)} layers -> {manifest}")
    return 0


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    source = _feature_source(cfg)
    layers = _fusion_layers(cfg, source.layers)
    score_layer = _score_layer(cfg, layers)
    train = source.entries("train")
    if len(train) < 2:
        raise CliError("empty-split", f"train split has {len(train)} images, need >= 2")

    feature_lists = {l: [] for l in layers}
    for entry in train:
        feats = source.features_for(entry, layers)
        for l in layers:
            feature_lists[l].append(feats[l])

    models = {}
    timing = {}
    for layer_id in layers:
        batch = FeatureBatch.from_tensors(feature_lists[layer_id])
        start = time.perf_counter()
        models[layer_id] = subspace.fit(batch, variance_threshold=cfg["variance"])
        timing[layer_id] = time.perf_counter() - start
        m = models[layer_id]
        print(
            f"fit {layer_id}: M={batch.count} d={batch.dim} -> m={m.n_components} "
            f"(retained {m.retained_variance:.5f}) in {timing[layer_id]:.3f}s"
        )

    bundle = ModelBundle(
        backbone=source.backbone_name,
        preprocess=source.preprocess.to_dict(),
        models=models,
        fusion_layers=tuple(layers),
        score_layer=score_layer,
    )
    bundle_path = out / "model.freb"
    subspace.save_bundle(bundle, bundle_path)
    report = {
        "bundle": str(bundle_path),
        "train_images": len(train),
        "variance_threshold": cfg["variance"],
        "layers": {
            l: {"fit_seconds": timing[l], "components": models[l].n_components,
                "dim": models[l].dim}
            for l in layers
        },
        "total_fit_seconds": sum(timing.values()),
    }
    (out / "fit.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"bundle -> {bundle_path} (total fit {report['total_fit_seconds']:.3f}s)")
    return 0


def _load_bundle_arg(cfg: dict) -> ModelBundle:
    if not cfg.get("bundle"):
        raise CliError("config", "--bundle required")
    return subspace.load_bundle(cfg["bundle"])


def _save_heatmap(map_data: np.ndarray, path_base: Path) -> None:
    from .tensor import save_npy

    save_npy(path_base.with_suffix(".npy"), map_data.astype(np.float32))
    lo, hi = float(map_data.min()), float(map_data.max())
    scaled = (map_data - lo) / (hi - lo) if hi > lo else np.zeros_like(map_data)
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(path_base.with_suffix(".png"))


def cmd_eval(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    bundle = _load_bundle_arg(cfg)
    source = _feature_source(cfg, preprocess=ds.PreprocessConfig.from_dict(bundle.preprocess))
    entries = source.entries("test")
    if not entries:
        raise CliError("empty-split", "test split is empty")
    input_res = source.input_resolution
    heat_dir = out / "heatmaps"
    if cfg["heatmaps"]:
        heat_dir.mkdir(exist_ok=True)

    def score_one(entry):
        feats = source.features_for(entry, list(bundle.fusion_layers))
        score, fused = fre.score_image(
            bundle,
            feats,
            input_res,
            signed_map=cfg["signed_maps"],
            normalize_maps=cfg["normalize_maps"],
            smooth_sigma=cfg["smooth_sigma"],
        )
        return entry, score, fused.map.data, source.mask_for(entry)

    results = _parallel_map(score_one, entries, cfg["workers"])

    records = []
    for entry, score, map_data, mask in results:
        records.append(
            metrics.EvalRecord(
                image_id=entry["id"],
                score=score,
                label=entry["label"],
                map=map_data if mask is not None else None,
                mask=mask,
            )
        )
        if cfg["heatmaps"]:
            _save_heatmap(map_data, heat_dir / sanitize_id(entry["id"]))

    with open(out / "scores.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "label", "defect_type", "score"])
        for entry, score, _, _ in results:
            writer.writerow([entry["id"], entry["label"], entry["defect_type"], f"{score:.9g}"])

    result = metrics.evaluate(records, fpr_limit=cfg["fpr_limit"])
    category = Path(cfg.get("dataset") or cfg.get("features")).name
    report = {
        "schema": "fre-metrics/1",
        "category": category,
        "bundle": str(cfg["bundle"]),
        "fusion_layers": list(bundle.fusion_layers),
        "score_layer": bundle.score_layer,
        "metrics": result,
    }
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    columns = ["image_auroc"] + (["pixel_auroc", "pro"] if "pixel_auroc" in result else [])
    table = metrics.render_table([{"category": category, **result}], columns)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_score(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    bundle = _load_bundle_arg(cfg)
    if not cfg.get("image") or not cfg.get("backbone"):
        raise CliError("config", "score requires --image and --backbone")
    backbone = load_backbone(cfg["backbone"])
    h, w = backbone.spec.input_shape[2:]
    pre = ds.PreprocessConfig.from_dict(bundle.preprocess)
    x = ds.preprocess(ds.load_rgb(cfg["image"]), pre)
    feats = backbone.forward(x)
    score, fused = fre.score_image(
        bundle, feats, (h, w), signed_map=cfg["signed_maps"],
        normalize_maps=cfg["normalize_maps"], smooth_sigma=cfg["smooth_sigma"],
    )
    base = out / sanitize_id(Path(cfg["image"]).stem)
    _save_heatmap(fused.map.data, base)
    result = {"image": str(cfg["image"]), "score": score, "heatmap": str(base.with_suffix(".png"))}
    print(json.dumps(result, sort_keys=True))
    return 0


def _stage_stats(samples_s: list[float]) -> dict:
    ms = [1000.0 * s for s in samples_s]
    return {
        "mean_ms": statistics.fmean(ms),
        "median_ms": statistics.median(ms),
        "min_ms": min(ms),
        "max_ms": max(ms),
    }


def cmd_bench(cfg: dict) -> int:
    out = _out_dir(cfg)
    _echo_config(cfg, out)
    bundle = _load_bundle_arg(cfg)
    if not cfg.get("backbone"):
        raise CliError("config", "bench requires --backbone")
    backbone = load_backbone(cfg["backbone"])
    h, w = backbone.spec.input_shape[2:]
    pre = ds.PreprocessConfig.from_dict(bundle.preprocess)

    if cfg.get("image"):
        image_path = Path(cfg["image"])
        decode = lambda: ds.load_rgb(image_path)
    else:
        rng = np.random.default_rng(0)
        synthetic = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        image_path = None
        decode = lambda: synthetic

    fusion = list(bundle.fusion_layers)
    warmup, iters = int(cfg["warmup"]), int(cfg["iters"])

    def one_pass(record):
        t0 = time.perf_counter()
        raw = decode()
        t1 = time.perf_counter()
        x = ds.preprocess(raw, pre)
        t2 = time.perf_counter()
        feats = backbone.forward(x)
        t3 = time.perf_counter()
        fre.score_image(
            bundle, feats, (h, w),
            signed_map=cfg["signed_maps"], normalize_maps=cfg["normalize_maps"],
            smooth_sigma=cfg["smooth_sigma"],
        )
        t4 = time.perf_counter()
        if record is not None:
            record["decode"].append(t1 - t0)
            record["preprocess"].append(t2 - t1)
            record["forward"].append(t3 - t2)
            record["fre"].append(t4 - t3)

    for _ in range(warmup):
        one_pass(None)
    stages = {"decode": [], "preprocess": [], "forward": [], "fre": []}
    for _ in range(iters):
        one_pass(stages)

    mean = {k: statistics.fmean(v) for k, v in stages.items()}
    median = {k: statistics.median(v) for k, v in stages.items()}
    compute = mean["preprocess"] + mean["forward"] + mean["fre"]
    report = {
        "schema": "fre-bench/1",
        "backbone": backbone.spec.backbone,
        "fusion_layers": fusion,
        "input_resolution": [h, w],
        "image": str(image_path) if image_path else None,
        "warmup": warmup,
        "iterations": iters,
        "stages_ms": {k: _stage_stats(v) for k, v in stages.items()},
        "fps": {
            "end_to_end": 1.0 / (mean["decode"] + compute),
            "excluding_decode": 1.0 / compute,
        },
        # medians: robust against scheduler spikes in either stage
        "fre_overhead_ratio": median["fre"] / median["forward"],
    }
    (out / "bench.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(
        f"forward {1000 * mean['forward']:.2f} ms, fre {1000 * mean['fre']:.2f} ms "
        f"(ratio {report['fre_overhead_ratio']:.3f}), "
        f"{report['fps']['excluding_decode']:.1f} fps excl. decode"
    )
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fredet",
        description="Anomaly detection and segmentation from deep-feature reconstruction error",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, source=True, bundle=False):
        p.add_argument("--config", help="TOML config file; flags override its values")
        p.add_argument("--out", help="output directory")
        if source:
            p.add_argument("--dataset", help="dataset category root")
            p.add_argument("--layout", choices=["mvtec", "mtd"], default=None)
            p.add_argument("--backbone", help="taps.json manifest of an ONNX backbone")
            p.add_argument("--features", help="pre-extracted feature directory")
            p.add_argument("--workers", type=int, default=None)
        if bundle:
            p.add_argument("--bundle", help="fitted .freb model bundle")
            p.add_argument("--signed-maps", dest="signed_maps", action="store_const", const=True)
            p.add_argument(
                "--normalize-maps", dest="normalize_maps", action="store_const", const=True
            )
            p.add_argument("--smooth-sigma", dest="smooth_sigma", type=float, default=None)

    p = sub.add_parser("extract", help="run the backbone over a dataset, dump NPY features")
    common(p)
    p.add_argument("--split", choices=["train", "test", "all"], default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fit", help="fit per-layer subspace models, write a bundle")
    common(p)
    p.add_argument("--layers", help="comma-separated fusion layer ids (1 or 3)")
    p.add_argument("--score-layer", dest="score_layer", help="layer whose score detects")
    p.add_argument("--variance", type=float, default=None, help="retained variance threshold")
    p.add_argument(
        "--any-layer-count", dest="any_layer_count", action="store_const", const=True
    )
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="score a test split and report metrics")
    common(p, bundle=True)
    p.add_argument("--heatmaps", action="store_const", const=True)
    p.add_argument("--fpr-limit", dest="fpr_limit", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score a single image")
    common(p, bundle=True)
    p.add_argument("--image", help="image file to score")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="measure per-stage latency and throughput")
    common(p, bundle=True)
    p.add_argument("--image", help="bench with this image instead of synthetic input")
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.func(cfg)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "detail": str(exc)}), file=sys.stderr)
        return 1
    except Exception as exc:  # single-line machine-parsable contract
        detail = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        print(json.dumps({"error": _error_code(exc), "detail": detail}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
