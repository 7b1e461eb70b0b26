"""Dual-student knowledge distillation for unsupervised anomaly detection and localization."""

from .backbone import build_decoder, build_encoder, build_teacher, l2_normalize
from .distill import TrainConfig, anomaly_map, scalar_loss, train
from .inference import AnomalyResult, ScoreCalibration, calibrate, infer
from .model import DSKD, VARIANTS

__version__ = "0.1.0"

__all__ = [
    "DSKD",
    "VARIANTS",
    "AnomalyResult",
    "ScoreCalibration",
    "TrainConfig",
    "anomaly_map",
    "build_decoder",
    "build_encoder",
    "build_teacher",
    "calibrate",
    "infer",
    "l2_normalize",
    "scalar_loss",
    "train",
]
