"""Run configuration and the fit / evaluate steps shared by the CLI and tests."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .backbone import build_teacher
from .checkpoint import save_checkpoint
from .data import Sample
from .distill import ConfigError, TrainConfig, TrainResult, train
from .inference import (
    ALL_MAPS,
    AnomalyResult,
    ScoreCalibration,
    anomaly_maps,
    calibrate,
    save_heatmap,
    score_and_classify,
)
from .metrics import UndefinedMetricError, auroc, pixel_auroc, pro
from .model import VARIANTS, DSKD

LOGGER = logging.getLogger(__name__)

MAP_NAMES = {"M1": (1,), "M2": (2,), "M3": (3,), "M1-3": (1, 2, 3)}


def parse_maps(text: Union[str, Sequence[int]]) -> Tuple[int, ...]:
    """``"M1-3"``, ``"M2"`` or ``"M1,M3"`` -> sorted level indices."""
    if not isinstance(text, str):
        levels = tuple(sorted(set(int(k) for k in text)))
    else:
        levels_set = set()
        for part in text.replace(" ", "").split(","):
            if part not in MAP_NAMES:
                raise ConfigError(f"unknown map selection {part!r}; use M1, M2, M3 or M1-3")
            levels_set.update(MAP_NAMES[part])
        levels = tuple(sorted(levels_set))
    if not levels or not set(levels) <= set(ALL_MAPS):
        raise ConfigError(f"map selection must be a non-empty subset of {ALL_MAPS}")
    return levels


def maps_label(levels: Sequence[int]) -> str:
    levels = tuple(levels)
    return "M1-3" if levels == ALL_MAPS else ",".join(f"M{k}" for k in levels)


@dataclass
class RunConfig:
    data: str = ""
    category: str = ""
    size: int = 256
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l2: float = 0.1
    sigma: float = 4.0
    batch_size: int = 8
    seed: int = 0
    variant: str = "DS"
    dfe: bool = True
    maps: str = "M1-3"
    out: str = "runs/dskd"
    teacher: str = "imagenet"
    teacher_seed: int = 1234
    device: str = "cpu"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: {self.variant!r} is not one of {VARIANTS}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs: must be a positive integer, got {self.epochs!r}")
        if self.size < 32 or self.size % 32:
            raise ConfigError(f"size: must be a positive multiple of 32, got {self.size}")
        if self.lambda_l2 < 0:
            raise ConfigError(f"lambda: must be >= 0, got {self.lambda_l2}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma: must be > 0, got {self.sigma}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        parse_maps(self.maps)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.lr,
            adam_betas=(self.beta1, self.beta2),
            epochs=self.epochs,
            lambda_l2=self.lambda_l2,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def with_overrides(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _coerce(name: str, value: str, kind) -> object:
    if kind is bool or kind == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if kind is int or kind == "int":
            return int(value)
        if kind is float or kind == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    return value.strip()


def read_config(path: Union[str, Path]) -> Dict[str, object]:
    """Flat ``key = value`` text file; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values: Dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown field {key!r}")
        values[key] = _coerce(key, value, types[key])
    return values


def write_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    """Snapshot with every field materialised; readable by :func:`read_config`."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def build_model(cfg: RunConfig) -> DSKD:
    teacher = None
    if cfg.variant != "E-D":
        teacher = build_teacher(cfg.teacher, seed=cfg.teacher_seed)
    model = DSKD(
        teacher,
        variant=cfg.variant,
        dfe_enabled=cfg.dfe,
        seed=cfg.seed,
        input_size=cfg.size,
        lambda_l2=cfg.lambda_l2,
        sigma=cfg.sigma,
    )
    return model.to(cfg.device)


def _train_tensor(samples) -> torch.Tensor:
    if isinstance(samples, torch.Tensor):
        return samples
    return torch.stack([s.image for s in samples])


@dataclass
class FitResult:
    model: DSKD
    calibration: ScoreCalibration
    history: TrainResult


def fit(cfg: RunConfig, train_samples, out_dir: Optional[Union[str, Path]] = None) -> FitResult:
    """Train one variant, calibrate on the training images, optionally save artefacts.

    With ``out_dir`` set, ``losses.csv``, ``config.txt`` and
    ``checkpoint.pt`` (refreshed every 50 epochs and at the end) are written.
    """
    cfg.validate()
    for s in train_samples if not isinstance(train_samples, torch.Tensor) else ():
        if s.label != 0:
            raise ConfigError(f"training sample {s.sample_id} is labelled anomalous")
    images = _train_tensor(train_samples)
    if images.shape[0] == 0:
        raise ConfigError("training set is empty")
    if images.shape[-1] != cfg.size:
        raise ConfigError(f"size: training images are {images.shape[-1]}px, config says {cfg.size}")
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    levels = parse_maps(cfg.maps)

    on_checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out_dir / "config.txt")

        def on_checkpoint(m: DSKD, epoch: int) -> None:
            save_checkpoint(
                out_dir / "checkpoint.pt", m, calibrate(m, images, levels), cfg.teacher, cfg.teacher_seed, levels
            )

    history = train(images, cfg.train_config(), model, out_dir=out_dir, on_checkpoint=on_checkpoint)
    calib = calibrate(model, images, levels)
    return FitResult(model, calib, history)


@dataclass
class Evaluation:
    image_auroc: Optional[float]
    pixel_auroc: Optional[float]
    pro: Optional[float]
    results: List[AnomalyResult] = field(default_factory=list)
    maps: Optional[np.ndarray] = None

    def row(self, **extra) -> dict:
        return {**extra, "image_auroc": self.image_auroc, "pixel_auroc": self.pixel_auroc, "pro": self.pro}


def _maybe(metric, *args, **kwargs) -> Optional[float]:
    try:
        return metric(*args, **kwargs)
    except UndefinedMetricError as exc:
        LOGGER.warning("metric undefined: %s", exc)
        return None


def evaluate(
    model: DSKD,
    calib: ScoreCalibration,
    samples: Sequence[Sample],
    maps: Union[str, Sequence[int]] = ALL_MAPS,
    heatmap_dir: Optional[Union[str, Path]] = None,
    pro_thresholds: Optional[int] = None,
) -> Evaluation:
    """Score every test sample and compute image AUROC, pixel AUROC and PRO.

    Metrics that are undefined for the split (single class, no regions) are
    reported as ``None``.
    """
    levels = parse_maps(maps) if isinstance(maps, str) else tuple(maps)
    if samples and samples[0].image.shape[-1] != model.input_size:
        raise ConfigError(
            f"size: test images are {samples[0].image.shape[-1]}px but the checkpoint expects {model.input_size}"
        )
    images = torch.stack([s.image for s in samples])
    amaps = anomaly_maps(model, images, levels)
    results = [score_and_classify(m, calib, s.sample_id) for m, s in zip(amaps, samples)]
    labels = [s.label for s in samples]
    img_auc = _maybe(auroc, [r.raw_score for r in results], labels)
    pairs = [(m, s.mask if s.mask is not None else np.zeros(m.shape, dtype=bool)) for m, s in zip(amaps, samples)]
    pix_auc = _maybe(pixel_auroc, pairs)
    if pro_thresholds is None and amaps.size > 4_000_000:
        pro_thresholds = 200
    pro_score = _maybe(pro, pairs, 0.3, pro_thresholds)
    if heatmap_dir is not None:
        heatmap_dir = Path(heatmap_dir)
        heatmap_dir.mkdir(parents=True, exist_ok=True)
        for m, s in zip(amaps, samples):
            name = s.sample_id.replace("/", "_")
            save_heatmap(m, heatmap_dir / f"{name}_amap.png", overlay=s.raw)
    return Evaluation(img_auc, pix_auc, pro_score, results, amaps)
