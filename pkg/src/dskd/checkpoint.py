"""Single-file checkpoint: student weights, calibration and config fingerprint.

Tensor keys are namespaced ``encoder.*``, ``decoder.*``, ``dfe.*`` and
``calib.*``; the fingerprint lives under ``config``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import torch

from .backbone import ResNetPyramid, build_teacher, state_dict_hash
from .inference import ALL_MAPS, ScoreCalibration
from .model import DSKD

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint missing, malformed or incompatible with the requested run."""


def fingerprint(model: DSKD, teacher_source: str, teacher_seed: int = 0, maps: Sequence[int] = ALL_MAPS) -> dict:
    """Everything needed to rebuild the model; ``maps`` are the levels the calibration was taken on."""
    teacher = model.teacher
    return {
        "format": FORMAT_VERSION,
        "input_size": int(model.input_size),
        "lambda_l2": float(model.lambda_l2),
        "sigma": float(model.sigma),
        "seed": int(model.seed),
        "variant": model.variant,
        "dfe_enabled": bool(model.dfe_enabled),
        "teacher": str(teacher_source),
        "teacher_seed": int(teacher_seed),
        "teacher_hash": state_dict_hash(teacher) if teacher is not None else "",
        "maps": [int(k) for k in maps],
    }


def save_checkpoint(
    path: Union[str, Path],
    model: DSKD,
    calib: ScoreCalibration,
    teacher_source: str = "imagenet",
    teacher_seed: int = 0,
    maps: Sequence[int] = ALL_MAPS,
) -> None:
    archive: dict = {}
    for name, module in model.saved_modules().items():
        for key, value in module.state_dict().items():
            archive[f"{name}.{key}"] = value.detach().cpu().clone()
    archive["calib.min_score"] = torch.tensor(float(calib.min_score), dtype=torch.float64)
    archive["calib.max_score"] = torch.tensor(float(calib.max_score), dtype=torch.float64)
    archive["config"] = fingerprint(model, teacher_source, teacher_seed, maps)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)


def read_checkpoint(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is unreadable: {exc}") from exc
    if not isinstance(archive, dict) or "config" not in archive:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    return archive


def load_checkpoint(
    path: Union[str, Path],
    teacher: Optional[ResNetPyramid] = None,
    teacher_source: Optional[str] = None,
) -> Tuple[DSKD, ScoreCalibration, dict]:
    """Rebuild the model and calibration stored at ``path``.

    The teacher is rebuilt from ``teacher_source`` (default: the source
    recorded in the checkpoint) unless passed in, and its hash must equal the
    recorded one.
    """
    archive = read_checkpoint(path)
    cfg = archive["config"]
    variant = cfg["variant"]
    if variant != "E-D":
        if teacher is None:
            source = teacher_source or cfg["teacher"]
            teacher = build_teacher(source, seed=cfg["teacher_seed"])
        if state_dict_hash(teacher) != cfg["teacher_hash"]:
            raise CheckpointError("teacher weights differ from the ones the checkpoint was trained with")
    model = DSKD(
        teacher if variant != "E-D" else None,
        variant=variant,
        dfe_enabled=cfg["dfe_enabled"],
        seed=cfg["seed"],
        input_size=cfg["input_size"],
        lambda_l2=cfg["lambda_l2"],
        sigma=cfg["sigma"],
    )
    for name, module in model.saved_modules().items():
        prefix = f"{name}."
        state = {k[len(prefix):]: v for k, v in archive.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {name} weights do not fit the {variant} model: {exc}") from exc
    calib = ScoreCalibration(float(archive["calib.min_score"]), float(archive["calib.max_score"]))
    model.eval()
    return model, calib, cfg
