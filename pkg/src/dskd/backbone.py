"""ResNet18-style teacher, encoder student and inverted decoder student.

All three networks expose a three-level feature pyramid ordered by increasing
depth: level 1 is the stride-4 map with 64 channels, level 3 the stride-16 map
with 256 channels.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn
from torch import Tensor
from torchvision.models import resnet18
from torchvision.models.resnet import BasicBlock

LOGGER = logging.getLogger(__name__)

# A feature pyramid is simply an ordered list of [B, C_k, H_k, W_k] tensors.
FeaturePyramid = List[Tensor]

PYRAMID_CHANNELS = (64, 128, 256)
INPUT_STRIDE = 32
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy the pyramid shape law."""


class TeacherLoadError(RuntimeError):
    """Raised when the pretrained teacher checkpoint is missing or unreadable."""


def check_input(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected [B, 3, H, W] input, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % INPUT_STRIDE or w % INPUT_STRIDE:
        raise ShapeError(f"input spatial size {h}x{w} is not divisible by {INPUT_STRIDE}")


def pyramid_shapes(size: int, batch: int = 1) -> list[tuple[int, int, int, int]]:
    """Expected pyramid shapes for a square input of side ``size``."""
    return [(batch, c, size // 2 ** (k + 1), size // 2 ** (k + 1)) for k, c in enumerate(PYRAMID_CHANNELS, 1)]


class ResNetPyramid(nn.Module):
    """ResNet18 truncated after ``layer3`` (conv2_x .. conv4_x taps).

    Used both for the frozen teacher and the encoder student; the two share
    topology so teacher weights can be copied straight into an encoder.
    """

    def __init__(self) -> None:
        super().__init__()
        net = resnet18(weights=None)
        self.conv1 = net.conv1
        self.bn1 = net.bn1
        self.relu = net.relu
        self.maxpool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3

    def forward(self, x: Tensor) -> FeaturePyramid:
        check_input(x)
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return [f1, f2, f3]


class UpBlock(nn.Module):
    """Basic residual block run backwards.

    The stride-2 conv becomes nearest 2x upsampling followed by a 3x3 conv,
    which avoids the checkerboard pattern of transposed convolutions. The
    shortcut upsamples the same way before its 1x1 projection.
    """

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.up(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class InvertedResNetPyramid(nn.Module):
    """Decoder student: the encoder's block list run in reverse.

    The embedding enters at the deepest resolution. Stage 3 keeps that
    resolution, stages 2 and 1 each open with an :class:`UpBlock`. The
    returned pyramid is reordered to increasing depth so that level k lines
    up with teacher level k.
    """

    def __init__(self, in_channels: int = PYRAMID_CHANNELS[-1]) -> None:
        super().__init__()
        c1, c2, c3 = PYRAMID_CHANNELS
        self.in_channels = in_channels
        shortcut = None
        if in_channels != c3:
            shortcut = nn.Sequential(nn.Conv2d(in_channels, c3, 1, bias=False), nn.BatchNorm2d(c3))
        self.stage3 = nn.Sequential(BasicBlock(in_channels, c3, downsample=shortcut), BasicBlock(c3, c3))
        self.stage2 = nn.Sequential(UpBlock(c3, c2), BasicBlock(c2, c2))
        self.stage1 = nn.Sequential(UpBlock(c2, c1), BasicBlock(c1, c1))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, embedding: Tensor) -> FeaturePyramid:
        if embedding.ndim != 4 or embedding.shape[1] != self.in_channels:
            raise ShapeError(
                f"decoder expects [B, {self.in_channels}, h, w] embedding, got {tuple(embedding.shape)}"
            )
        d3 = self.stage3(embedding)
        d2 = self.stage2(d3)
        d1 = self.stage1(d2)
        # emitted deepest-first; reorder to match teacher levels
        return [d1, d2, d3]


def l2_normalize(pyramid: Sequence[Tensor], eps: float = NORM_EPS) -> FeaturePyramid:
    """Scale every spatial feature vector to unit Euclidean norm over channels.

    Zero vectors stay zero thanks to ``eps`` in the denominator.
    """
    return [f / (torch.linalg.vector_norm(f, dim=1, keepdim=True) + eps) for f in pyramid]


def state_dict_hash(module: nn.Module) -> str:
    """sha256 over the serialized state dict, in key order."""
    h = hashlib.sha256()
    for key, value in module.state_dict().items():
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def seeded(module_factory, seed: int) -> nn.Module:
    """Build a module under a fixed torch RNG state without disturbing the global one."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return module_factory()


def _load_resnet_state(source: Union[str, Path]) -> dict:
    if str(source) == "imagenet":
        try:
            from torchvision.models import ResNet18_Weights

            return ResNet18_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
        except Exception as exc:  # network or cache failure
            raise TeacherLoadError(f"could not fetch ImageNet ResNet18 weights: {exc}") from exc
    path = Path(source)
    if not path.is_file():
        raise TeacherLoadError(f"teacher checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise TeacherLoadError(f"teacher checkpoint {path} is unreadable: {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise TeacherLoadError(f"teacher checkpoint {path} does not hold a state dict")
    return state


def _calibrate_batchnorm(net: nn.Module, seed: int, batches: int = 4, batch_size: int = 16, size: int = 64) -> None:
    """Replace default BN running statistics with ones measured on seeded Gaussian noise.

    A freshly initialised network keeps mean 0 / variance 1 in every BN layer,
    so in eval mode the normalisation is a no-op and the uncentred deep
    features point in nearly the same direction everywhere. Estimating the
    statistics once, on inputs that match standardised images in scale,
    spreads them out without looking at any dataset.
    """
    gen = torch.Generator().manual_seed(seed)
    bns = [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average over all calibration batches
    net.train()
    with torch.no_grad():
        for _ in range(batches):
            net(torch.randn(batch_size, 3, size, size, generator=gen))
    for m, momentum in zip(bns, saved):
        m.momentum = momentum


def build_teacher(source: Optional[Union[str, Path]] = "imagenet", seed: int = 0) -> ResNetPyramid:
    """Create the frozen teacher.

    Args:
        source: ``"imagenet"`` for torchvision's ImageNet-1K ResNet18 weights,
            a path to a torchvision-format ResNet18 state dict, or ``None`` /
            ``"random"`` for a seeded random network (offline fallback) whose
            BatchNorm statistics are estimated on seeded Gaussian noise.
        seed: initialisation seed used only for the random fallback.

    Raises:
        TeacherLoadError: when weights are missing, unreadable or incomplete.
    """
    if source is None or str(source) == "random":
        teacher = seeded(ResNetPyramid, seed)
        _calibrate_batchnorm(teacher, seed)
    else:
        teacher = ResNetPyramid()
        state = _load_resnet_state(source)
        wanted = teacher.state_dict().keys()
        missing = [k for k in wanted if k not in state and not k.endswith("num_batches_tracked")]
        if missing:
            raise TeacherLoadError(f"teacher checkpoint lacks {len(missing)} keys, e.g. {missing[:3]}")
        try:
            teacher.load_state_dict({k: state[k] for k in wanted if k in state}, strict=False)
        except RuntimeError as exc:
            raise TeacherLoadError(f"teacher checkpoint does not match ResNet18: {exc}") from exc
    teacher.eval()
    teacher.requires_grad_(False)
    return teacher


def build_encoder(seed: int = 0) -> ResNetPyramid:
    return seeded(ResNetPyramid, seed)


def build_decoder(seed: int = 0, in_channels: int = PYRAMID_CHANNELS[-1]) -> InvertedResNetPyramid:
    return seeded(lambda: InvertedResNetPyramid(in_channels), seed)
