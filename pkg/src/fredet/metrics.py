"""Image AUROC, pixel AUROC, and the PRO segmentation metric.

Label convention everywhere: 1 = anomalous, 0 = normal; higher score means
more anomalous. AUROC is computed as the normalized Mann-Whitney U with
half credit for ties, so it is exactly the probability that a random
anomalous sample outranks a random normal one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

# 8-connectivity for ground-truth regions
_STRUCTURE_8 = np.ones((3, 3), dtype=np.int8)

# Sweep all distinct map values up to this count, then quantile-spaced.
MAX_THRESHOLDS = 512

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class SingleClassError(ValueError):
    """Metric needs both classes present."""


@dataclass(frozen=True)
class EvalRecord:
    """Per-image evaluation payload."""

    image_id: str
    score: float
    label: int  # 1 anomalous, 0 normal
    map: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if not np.isin(mask, (0, 1)).all():
                raise ValueError("mask must be strictly binary")
            object.__setattr__(self, "mask", mask.astype(np.uint8))
        if self.map is not None and self.mask is not None:
            if np.shape(self.map) != np.shape(self.mask):
                raise ValueError(
                    f"map shape {np.shape(self.map)} != mask shape {np.shape(self.mask)}"
                )


@dataclass(frozen=True)
class ProCurve:
    """Mean per-region overlap vs false-positive rate, up to fpr_limit."""

    fprs: np.ndarray        # ascending, within [0, fpr_limit]
    overlaps: np.ndarray    # in [0, 1]
    fpr_limit: float
    area: float             # integral of overlap over [0, fpr_limit] / fpr_limit


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank formulation, ties counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(scores)  # average ranks on ties
    rank_sum = float(ranks[labels == 1].sum())
    u_stat = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def pixel_auroc(maps, masks) -> float:
    """AUROC over the pooled pixels of all images."""
    if len(maps) != len(masks) or not maps:
        raise ValueError("need one mask per map")
    flat_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    flat_labels = np.concatenate([np.asarray(g).ravel() for g in masks])
    return auroc(flat_scores, flat_labels)


def label_regions(mask: np.ndarray):
    """8-connected components of a binary mask: (labels array, region count)."""
    labels, count = ndimage.label(np.asarray(mask) != 0, structure=_STRUCTURE_8)
    return labels, count


def _select_thresholds(values: np.ndarray) -> np.ndarray:
    """Descending sweep thresholds: all distinct values when few enough,
    otherwise quantile-spaced (min and max always included)."""
    distinct = np.unique(values)
    if distinct.size <= MAX_THRESHOLDS:
        return distinct[::-1]
    qs = np.linspace(0.0, 1.0, MAX_THRESHOLDS)
    return np.unique(np.quantile(values, qs))[::-1]


def pro(maps, masks, fpr_limit: float = 0.3) -> ProCurve:
    """Per-region overlap curve and its normalized area up to fpr_limit.

    For each threshold of a descending sweep, overlap is |pred AND region| /
    |region| averaged over every ground-truth region of every image, and the
    false-positive rate pools all normal pixels globally. The curve gets a
    (0, 0) anchor, is cut at fpr_limit by linear interpolation, integrated
    by trapezoid, and normalized by fpr_limit.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if len(maps) != len(masks) or not maps:
        raise ValueError("need one mask per map")

    region_values = []   # sorted map values inside each GT region
    normal_values = []   # map values on normal pixels
    for m, g in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise ValueError(f"map shape {m.shape} != mask shape {g.shape}")
        labels, count = label_regions(g)
        for r in range(1, count + 1):
            region_values.append(np.sort(m[labels == r]))
        normal_values.append(m[g == 0])
    if not region_values:
        raise ValueError("masks contain no positive pixels: no regions to overlap")
    normal_values = np.sort(np.concatenate(normal_values))
    if normal_values.size == 0:
        raise SingleClassError("no normal pixels for the false-positive rate")

    all_values = np.concatenate([np.concatenate(region_values), normal_values])
    thresholds = _select_thresholds(all_values)

    # pred = (map >= t); counts above each threshold come from positions in
    # the per-region / normal-pool sorted arrays, all thresholds at once
    n_normal = normal_values.size
    fp = n_normal - np.searchsorted(normal_values, thresholds, side="left")
    overlap_sum = np.zeros(thresholds.size)
    for rv in region_values:
        overlap_sum += (rv.size - np.searchsorted(rv, thresholds, side="left")) / rv.size
    fprs = np.concatenate([[0.0], fp / n_normal])
    overlaps = np.concatenate([[0.0], overlap_sum / len(region_values)])

    return _integrate_pro(fprs, overlaps, fpr_limit)


def _integrate_pro(fprs: np.ndarray, overlaps: np.ndarray, fpr_limit: float) -> ProCurve:
    """Clip the (ascending-fpr) curve at fpr_limit and integrate."""
    cut = np.searchsorted(fprs, fpr_limit, side="right")
    if cut < fprs.size and fprs[cut - 1] < fpr_limit:
        # interpolate the overlap where the curve crosses the limit
        x0, x1 = fprs[cut - 1], fprs[cut]
        y0, y1 = overlaps[cut - 1], overlaps[cut]
        y_at = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        xs = np.append(fprs[:cut], fpr_limit)
        ys = np.append(overlaps[:cut], y_at)
    else:
        xs = fprs[:cut]
        ys = overlaps[:cut]
    area = float(_trapezoid(ys, xs)) / fpr_limit
    return ProCurve(fprs=xs, overlaps=ys, fpr_limit=float(fpr_limit), area=area)


def evaluate(records: list[EvalRecord], fpr_limit: float = 0.3) -> dict:
    """Compute every metric the record set supports.

    Image AUROC always; pixel AUROC and PRO when at least one record carries
    a (map, mask) pair. Returns a plain dict ready for JSON dumping.
    """
    if not records:
        raise ValueError("no records to evaluate")
    out = {
        "n_images": len(records),
        "image_auroc": auroc([r.score for r in records], [r.label for r in records]),
    }
    with_masks = [r for r in records if r.map is not None and r.mask is not None]
    if with_masks:
        maps = [r.map for r in with_masks]
        masks = [r.mask for r in with_masks]
        out["pixel_auroc"] = pixel_auroc(maps, masks)
        out["pro"] = pro(maps, masks, fpr_limit=fpr_limit).area
        out["pro_fpr_limit"] = fpr_limit
    return out


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Plain-text metric table: one row per category plus an average row."""
    header = ["category"] + columns
    lines = []
    widths = [max(len(h), 12) for h in header]

    def fmt(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))

    lines.append(fmt(header))
    lines.append(fmt(["-" * w for w in widths]))
    sums = {c: [] for c in columns}
    for row in rows:
        cells = [row.get("category", "-")]
        for c in columns:
            v = row.get(c)
            cells.append("-" if v is None else f"{100.0 * v:.2f}")
            if v is not None:
                sums[c].append(v)
        lines.append(fmt(cells))
    if len(rows) > 1:
        cells = ["average"]
        for c in columns:
            cells.append(f"{100.0 * np.mean(sums[c]):.2f}" if sums[c] else "-")
        lines.append(fmt(cells))
    return "\n".join(lines) + "\n"
