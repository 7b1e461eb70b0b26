"""Pixel-wise distillation losses and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import torch
from torch import Tensor

from .backbone import NORM_EPS, ShapeError
from .model import DSKD

LOGGER = logging.getLogger(__name__)

AnomalyMapStack = List[Tensor]  # K tensors of shape [B, h_k, w_k]


class ConfigError(ValueError):
    """Invalid training or run configuration."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""


def _check_pair(a: Sequence[Tensor], b: Sequence[Tensor]) -> None:
    if len(a) != len(b):
        raise ShapeError(f"pyramids have {len(a)} and {len(b)} levels")
    for k, (x, y) in enumerate(zip(a, b), 1):
        if x.shape != y.shape:
            raise ShapeError(f"level {k}: shapes {tuple(x.shape)} and {tuple(y.shape)} differ")


def pixel_l2_loss(a: Sequence[Tensor], b: Sequence[Tensor]) -> AnomalyMapStack:
    """Half squared Euclidean distance between feature vectors, per pixel."""
    _check_pair(a, b)
    return [0.5 * (x - y).pow(2).sum(dim=1) for x, y in zip(a, b)]


def pixel_cosine_loss(a: Sequence[Tensor], b: Sequence[Tensor], eps: float = NORM_EPS) -> AnomalyMapStack:
    """One minus cosine similarity between feature vectors, per pixel.

    Both inputs are divided by their own (epsilon-guarded) norms and the
    result is evaluated as ``0.5 * ||a/|a| - b/|b|||^2``, which equals
    ``1 - cos`` for nonzero vectors but is exactly zero for identical inputs
    and can never go negative through round-off.
    """
    _check_pair(a, b)
    out = []
    for x, y in zip(a, b):
        xn = x / (torch.linalg.vector_norm(x, dim=1, keepdim=True) + eps)
        yn = y / (torch.linalg.vector_norm(y, dim=1, keepdim=True) + eps)
        out.append(0.5 * (xn - yn).pow(2).sum(dim=1))
    return out


def anomaly_map(a: Sequence[Tensor], b: Sequence[Tensor], lambda_l2: float = 0.1) -> AnomalyMapStack:
    """Per-level discrepancy ``lambda * l2 + cosine`` between two normalised pyramids."""
    l2 = pixel_l2_loss(a, b)
    cos = pixel_cosine_loss(a, b)
    return [lambda_l2 * p + q for p, q in zip(l2, cos)]


def scalar_loss(stack: Sequence[Tensor]) -> Tensor:
    """Mean over pixels per level, then over levels, then over the batch."""
    if len(stack) == 0:
        raise ValueError("empty anomaly-map stack")
    per_level = torch.stack([m.flatten(1).mean(dim=1) for m in stack], dim=0)  # [K, B]
    return per_level.mean(dim=0).mean()


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.5, 0.999)
    epochs: int = 200
    lambda_l2: float = 0.1
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 50

    def validate(self) -> None:
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be a positive integer, got {self.epochs!r}")
        if self.lambda_l2 < 0:
            raise ConfigError(f"lambda_l2 must be >= 0, got {self.lambda_l2}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainResult:
    model: DSKD
    step_losses: List[Dict[str, float]] = field(default_factory=list)
    epoch_losses: List[Dict[str, float]] = field(default_factory=list)


def compute_losses(model: DSKD, x: Tensor, lambda_l2: float) -> Dict[str, Tensor]:
    """Scalar encoder loss ``e`` and/or decoder loss ``d`` for one batch."""
    feats = model(x, needed=tuple({n for pair in model.loss_pairs.values() for n in pair}))
    return {
        name: scalar_loss(anomaly_map(feats[ref], feats[student], lambda_l2))
        for name, (ref, student) in model.loss_pairs.items()
    }


def _as_tensor(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return torch.stack([s.image for s in images])


def train(
    images,
    cfg: TrainConfig,
    model: DSKD,
    out_dir: Optional[Union[str, Path]] = None,
    on_checkpoint: Optional[Callable[[DSKD, int], None]] = None,
) -> TrainResult:
    """Fit the students of ``model`` to anomaly-free images.

    One Adam optimiser holds an encoder group and a decoder(+embedding)
    group; the summed loss is back-propagated once per batch. Since the
    decoder path is detached from the encoder, this produces the same
    gradients as two separate updates.

    Args:
        images: tensor [N, 3, H, W] or a sequence of samples with ``.image``.
        cfg: optimiser and schedule settings.
        model: freshly initialised variant to train in place.
        out_dir: if given, per-epoch telemetry is appended to ``losses.csv``.
        on_checkpoint: called with ``(model, epoch)`` every
            ``cfg.checkpoint_every`` epochs and after the last one.
    """
    cfg.validate()
    data = _as_tensor(images)
    if data.shape[0] == 0:
        raise ConfigError("training set is empty")
    device = next(iter(model.parameters())).device
    groups = model.parameter_groups()
    optimizer = torch.optim.Adam(
        [{"params": p, "name": n} for n, p in groups.items()],
        lr=cfg.learning_rate,
        betas=tuple(cfg.adam_betas),
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    result = TrainResult(model=model)

    csv_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        csv_path = Path(out_dir) / "losses.csv"
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "loss_e", "loss_d", "wall_seconds"])

    start = time.perf_counter()
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(data.shape[0], generator=gen)
        sums: Dict[str, float] = {}
        n_batches = 0
        for i in range(0, len(order), cfg.batch_size):
            x = data[order[i : i + cfg.batch_size]].to(device)
            losses = compute_losses(model, x, cfg.lambda_l2)
            total = sum(losses.values())
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                    + ", ".join(f"{k}={v.item()}" for k, v in losses.items())
                )
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            values = {k: v.item() for k, v in losses.items()}
            result.step_losses.append(values)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        epoch_loss = {k: v / n_batches for k, v in sums.items()}
        result.epoch_losses.append(epoch_loss)
        wall = time.perf_counter() - start
        LOGGER.info(
            "epoch %d/%d loss_e=%s loss_d=%s (%.1fs)",
            epoch, cfg.epochs, epoch_loss.get("e"), epoch_loss.get("d"), wall,
        )
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch, _fmt(epoch_loss.get("e")), _fmt(epoch_loss.get("d")), f"{wall:.3f}"]
                )
        if on_checkpoint is not None and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            model.eval()
            on_checkpoint(model, epoch)
            model.train()
    model.eval()
    return result


def _fmt(value: Optional[float]) -> str:
    return "" if value is None or math.isnan(value) else f"{value:.6f}"
