"""Image/pixel AUROC and the per-region-overlap (PRO) score."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

SegmentationPair = Tuple[np.ndarray, np.ndarray]  # (score map, binary mask)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. a single class)."""


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact ROC area via the Mann-Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(pairs: Iterable[SegmentationPair]) -> float:
    """AUROC over all pixels of all pairs pooled together."""
    maps, masks = [], []
    for amap, mask in pairs:
        amap, mask = np.asarray(amap), np.asarray(mask)
        if amap.shape != mask.shape:
            raise ValueError(f"map {amap.shape} and mask {mask.shape} differ in shape")
        maps.append(amap.ravel())
        masks.append(mask.ravel().astype(bool))
    if not maps:
        raise UndefinedMetricError("no segmentation pairs")
    return auroc(np.concatenate(maps), np.concatenate(masks))


def connected_components(mask: np.ndarray) -> List[Set[Tuple[int, int]]]:
    """8-connected foreground regions as sets of (row, col) coordinates."""
    labelled, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_EIGHT_CONNECTED)
    regions: List[Set[Tuple[int, int]]] = []
    for idx in range(1, n + 1):
        rows, cols = np.nonzero(labelled == idx)
        regions.append(set(zip(rows.tolist(), cols.tolist())))
    return regions


def _overlap_weights(masks: Sequence[np.ndarray]) -> np.ndarray:
    """Per-pixel weight 1 / (|region| * n_regions) for anomalous pixels, 0 elsewhere."""
    weights = []
    n_regions = 0
    for mask in masks:
        labelled, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
        sizes = np.bincount(labelled.ravel())
        w = np.zeros(mask.shape, dtype=np.float64)
        fg = labelled > 0
        w[fg] = 1.0 / sizes[labelled[fg]]
        weights.append(w.ravel())
        n_regions += n
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one ground-truth region")
    return np.concatenate(weights) / n_regions


def pro_curve(
    pairs: Iterable[SegmentationPair], num_thresholds: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(FPR, mean region overlap) points for a descending threshold sweep.

    A pixel is predicted anomalous when its score is >= the threshold. With
    ``num_thresholds=None`` every distinct score value is a threshold;
    otherwise that many quantiles of the pooled scores are used. The curve
    starts at (0, 0), the threshold above every score.
    """
    maps, masks = [], []
    for amap, mask in pairs:
        amap, mask = np.asarray(amap, dtype=np.float64), np.asarray(mask, dtype=bool)
        if amap.shape != mask.shape:
            raise ValueError(f"map {amap.shape} and mask {mask.shape} differ in shape")
        maps.append(amap)
        masks.append(mask)
    weights = _overlap_weights(masks)
    scores = np.concatenate([m.ravel() for m in maps])
    normal = ~np.concatenate([m.ravel() for m in masks])
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("PRO needs normal pixels to measure false positives")

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    cum_overlap = np.cumsum(weights[order])
    cum_fp = np.cumsum(normal[order]) / n_normal
    if num_thresholds is None:
        # last index of each run of equal scores
        ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    else:
        thresholds = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, num_thresholds)))[::-1]
        # number of pixels with score >= t, for each threshold
        counts = np.searchsorted(-s_sorted, -thresholds, side="right")
        ends = counts[counts > 0] - 1
    fpr = np.r_[0.0, cum_fp[ends]]
    overlap = np.r_[0.0, cum_overlap[ends]]
    return fpr, overlap


def area_to_limit(fpr: np.ndarray, overlap: np.ndarray, limit: float) -> float:
    """Trapezoidal area under ``overlap(fpr)`` on [0, limit], interpolating at ``limit``."""
    keep = fpr <= limit
    x, y = fpr[keep], overlap[keep]
    if x[-1] < limit:
        nxt = np.flatnonzero(~keep)
        if nxt.size:
            i = nxt[0]
            x0, x1, y0, y1 = fpr[i - 1], fpr[i], overlap[i - 1], overlap[i]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        else:
            y_lim = y[-1]
        x, y = np.r_[x, limit], np.r_[y, y_lim]
    return float(np.trapezoid(y, x)) if hasattr(np, "trapezoid") else float(np.trapz(y, x))


def pro(pairs: Iterable[SegmentationPair], fpr_limit: float = 0.3, num_thresholds: Optional[int] = None) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_limit``.

    Every connected ground-truth region counts equally regardless of size.
    The area is divided by ``fpr_limit`` so a perfect segmentation scores 1.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, overlap = pro_curve(pairs, num_thresholds)
    return area_to_limit(fpr, overlap, fpr_limit) / fpr_limit


def write_report(path: Union[str, Path], rows: Sequence[dict], first_column: str = "category") -> None:
    """CSV with one row per category (or variant) and the three metric columns."""
    columns = [first_column, "image_auroc", "pixel_auroc", "pro"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in columns})


def _cell(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return "undefined" if np.isnan(value) else f"{value:.6f}"
    return str(value)
