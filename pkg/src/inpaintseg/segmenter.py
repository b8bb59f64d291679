"""Foreground reconstruction and soft mask from a cropped patch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .detector import ConfigurationError
from .nets import BottleneckAutoencoder


@dataclass
class SegOutput:
    recon: torch.Tensor   # (B, 3, s, s) in [0, 1]
    mask: torch.Tensor    # (B, 1, s, s) in [0, 1]


class Segmenter(nn.Module):
    def __init__(self, crop_size: int = 64, channels=(16, 32, 64, 64), bottleneck: int = 64):
        super().__init__()
        if crop_size % 2 ** len(channels):
            raise ConfigurationError(f"crop_size {crop_size} not divisible by 2**{len(channels)}")
        self.crop_size = crop_size
        self.net = BottleneckAutoencoder(3, channels, bottleneck)

    def bottleneck_ratio(self) -> float:
        """Bottleneck feature count relative to the number of input values."""
        return self.net.bottleneck_size(self.crop_size) / (3 * self.crop_size ** 2)

    def forward(self, patches: torch.Tensor) -> SegOutput:
        if tuple(patches.shape[-2:]) != (self.crop_size, self.crop_size):
            raise ConfigurationError(
                f"expected {self.crop_size}x{self.crop_size} patches, got {tuple(patches.shape[-2:])}")
        out = self.net(patches)
        return SegOutput(recon=out["recon"], mask=out["mask"])


def segment(patch, segmenter: Segmenter) -> SegOutput:
    with torch.no_grad():
        return segmenter(patch)
