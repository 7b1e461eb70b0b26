"""Deep feature embedding: fuse a three-level pyramid into one deep-resolution map."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import PYRAMID_CHANNELS, ShapeError

EMBED_CHANNELS = 256


def conv_block(in_channels: int, out_channels: int, stride: int = 2, bias: bool = False) -> nn.Sequential:
    """3x3 conv -> batch norm -> ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=bias),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class ResidualFuse(nn.Module):
    """Residual block with a 1x1 projection shortcut."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = False) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=bias)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=bias)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=bias),
            nn.BatchNorm2d(out_channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class FeatureEmbedding(nn.Module):
    """Downsample levels 1 and 2 to level-3 resolution, concatenate, fuse.

    Each stride-2 block doubles the channel count, so the concatenation has
    3 * 256 = 768 channels before the residual fuse maps it to ``out_channels``.
    """

    def __init__(self, out_channels: int = EMBED_CHANNELS, bias: bool = False) -> None:
        super().__init__()
        c1, c2, c3 = PYRAMID_CHANNELS
        self.out_channels = out_channels
        self.down1 = nn.Sequential(conv_block(c1, 2 * c1, bias=bias), conv_block(2 * c1, 4 * c1, bias=bias))
        self.down2 = conv_block(c2, 2 * c2, bias=bias)
        self.fuse = ResidualFuse(4 * c1 + 2 * c2 + c3, out_channels, bias=bias)

    def forward(self, pyramid: Sequence[Tensor]) -> Tensor:
        if len(pyramid) != 3:
            raise ShapeError(f"expected 3 pyramid levels, got {len(pyramid)}")
        f1, f2, f3 = pyramid
        b, _, h, w = f3.shape
        for k, (f, c) in enumerate(zip(pyramid, PYRAMID_CHANNELS)):
            scale = 2 ** (2 - k)
            if f.shape != (b, c, h * scale, w * scale):
                raise ShapeError(f"pyramid level {k + 1} has shape {tuple(f.shape)}, expected {(b, c, h * scale, w * scale)}")
        x = torch.cat([self.down1(f1), self.down2(f2), f3], dim=1)
        return self.fuse(x)


class DeepestLevelProjection(nn.Module):
    """Embedding used when multi-scale fusion is switched off.

    Only the deepest encoder level feeds the decoder, through a single
    stride-1 conv block; levels 1 and 2 are ignored.
    """

    def __init__(self, out_channels: int = EMBED_CHANNELS) -> None:
        super().__init__()
        self.out_channels = out_channels
        self.proj = conv_block(PYRAMID_CHANNELS[-1], out_channels, stride=1)

    def forward(self, pyramid: Sequence[Tensor]) -> Tensor:
        if len(pyramid) != 3:
            raise ShapeError(f"expected 3 pyramid levels, got {len(pyramid)}")
        return self.proj(pyramid[-1])
