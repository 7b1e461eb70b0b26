"""Anomaly-map fusion, smoothing, scoring and export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from torch import Tensor

from .distill import anomaly_map
from .model import DSKD

THRESHOLD = 0.5
ALL_MAPS = (1, 2, 3)


class CalibrationError(ValueError):
    """Score calibration statistics are unusable."""


@dataclass
class ScoreCalibration:
    min_score: float
    max_score: float

    def validate(self) -> None:
        if not (math.isfinite(self.min_score) and math.isfinite(self.max_score)):
            raise CalibrationError(f"non-finite calibration {self}")
        if self.max_score <= self.min_score:
            raise CalibrationError(f"max_score {self.max_score} must exceed min_score {self.min_score}")


@dataclass
class AnomalyResult:
    map: np.ndarray  # [H, W]
    raw_score: float
    normalized_score: float
    is_anomalous: bool
    sample_id: str = ""


def fuse_maps(stack: Sequence[Tensor], size: Tuple[int, int]) -> Tensor:
    """Bilinearly upsample each [B, h_k, w_k] map to ``size`` and sum them."""
    if len(stack) == 0:
        raise ValueError("empty anomaly-map stack")
    out = None
    for m in stack:
        up = F.interpolate(m.unsqueeze(1), size=tuple(size), mode="bilinear", align_corners=False).squeeze(1)
        out = up if out is None else out + up
    return out


def smooth(amap: np.ndarray, sigma: float = 4.0) -> np.ndarray:
    """Gaussian filter over the last two axes, radius ceil(4 sigma), reflect borders."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    amap = np.asarray(amap, dtype=np.float64)
    radius = int(math.ceil(4 * sigma))
    sig = (0,) * (amap.ndim - 2) + (sigma, sigma)
    rad = (0,) * (amap.ndim - 2) + (radius, radius)
    return gaussian_filter(amap, sigma=sig, radius=rad, mode="reflect")


def score_and_classify(amap: np.ndarray, calib: ScoreCalibration, sample_id: str = "") -> AnomalyResult:
    """Max-pixel score, min-max normalised and thresholded at 0.5 (inclusive)."""
    calib.validate()
    raw = float(np.max(amap))
    norm = (raw - calib.min_score) / (calib.max_score - calib.min_score)
    norm = float(min(max(norm, 0.0), 1.0))
    return AnomalyResult(np.asarray(amap), raw, norm, norm >= THRESHOLD, sample_id)


@torch.no_grad()
def anomaly_maps(
    model: DSKD,
    images: Tensor,
    maps: Sequence[int] = ALL_MAPS,
    batch_size: int = 16,
) -> np.ndarray:
    """Fused and smoothed anomaly maps [N, H, W] for an image batch.

    Only the variant's inference pair is compared (teacher vs decoder for the
    dual-student model). ``maps`` selects which pyramid levels are fused.
    """
    if not maps:
        raise ValueError("at least one map level must be selected")
    model.eval()
    ref, student = model.inference_pair
    device = next(iter(model.parameters())).device
    out = []
    for i in range(0, images.shape[0], batch_size):
        x = images[i : i + batch_size].to(device)
        feats = model(x, needed=(ref, student))
        stack = anomaly_map(feats[ref], feats[student], model.lambda_l2)
        fused = fuse_maps([stack[k - 1] for k in maps], x.shape[-2:])
        out.append(smooth(fused.cpu().double().numpy(), model.sigma))
    return np.concatenate(out, axis=0)


def calibrate(model: DSKD, images: Tensor, maps: Sequence[int] = ALL_MAPS) -> ScoreCalibration:
    """min 0, max = largest raw score over anomaly-free images."""
    scores = anomaly_maps(model, images, maps).reshape(images.shape[0], -1).max(axis=1)
    return ScoreCalibration(0.0, float(scores.max()))


def infer(
    image: Tensor,
    model: DSKD,
    calib: ScoreCalibration,
    sample_id: str = "",
    maps: Sequence[int] = ALL_MAPS,
) -> AnomalyResult:
    """Full per-image path: forward, discrepancy, fuse, smooth, score, classify."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.shape[-1] != model.input_size or image.shape[-2] != model.input_size:
        raise ValueError(f"image size {tuple(image.shape[-2:])} does not match model input size {model.input_size}")
    amap = anomaly_maps(model, image, maps)[0]
    return score_and_classify(amap, calib, sample_id)


def _heat_colours(values: np.ndarray) -> np.ndarray:
    # blue -> cyan -> yellow -> red ramp
    stops = np.array([[0, 0, 128], [0, 200, 255], [255, 230, 0], [200, 0, 0]], dtype=np.float64)
    pos = values * (len(stops) - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, len(stops) - 2)
    frac = (pos - lo)[..., None]
    return stops[lo] * (1 - frac) + stops[lo + 1] * frac


def save_heatmap(
    amap: np.ndarray,
    path: Union[str, Path],
    overlay: Optional[np.ndarray] = None,
    alpha: float = 0.5,
) -> None:
    """8-bit PNG of a per-image min-max scaled map, optionally blended on the input."""
    amap = np.asarray(amap, dtype=np.float64)
    span = amap.max() - amap.min()
    scaled = (amap - amap.min()) / span if span > 0 else np.zeros_like(amap)
    if overlay is None:
        Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
        return
    rgb = (1 - alpha) * overlay.astype(np.float64) + alpha * _heat_colours(scaled)
    Image.fromarray(np.clip(np.round(rgb), 0, 255).astype(np.uint8)).save(path)


def write_results(
    path: Union[str, Path], results: Sequence[AnomalyResult], labels: Optional[Sequence[int]] = None
) -> None:
    """Per-sample score CSV; the label column is left blank when labels are unknown."""
    if labels is None:
        labels = [""] * len(results)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "raw_score", "normalized_score", "is_anomalous", "label"])
        for r, y in zip(results, labels):
            writer.writerow([r.sample_id, f"{r.raw_score:.6f}", f"{r.normalized_score:.6f}", int(r.is_anomalous), y])
