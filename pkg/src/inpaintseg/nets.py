"""Convolutional building blocks shared by the detector, segmenter and inpainter."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1),
        nn.GroupNorm(min(4, cout), cout),
        nn.LeakyReLU(0.1),
    )


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = conv_block(cin, cout)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class BottleneckAutoencoder(nn.Module):
    """Encoder-decoder without skip connections.

    Everything the decoder sees passes through the ``bottleneck`` feature
    volume, so reconstructions are necessarily approximate.
    """

    def __init__(self, in_channels: int = 3, channels=(16, 32, 64, 64), bottleneck: int = 64,
                 heads=(("recon", 3), ("mask", 1))):
        super().__init__()
        layers, cin = [], in_channels
        for c in channels:
            layers.append(conv_block(cin, c, stride=2))
            cin = c
        self.encoder = nn.Sequential(*layers, nn.Conv2d(cin, bottleneck, 1))
        ups, cin = [], bottleneck
        for c in reversed(channels):
            ups.append(Upsample(cin, c))
            cin = c
        self.decoder = nn.Sequential(*ups)
        self.heads = nn.ModuleDict({name: nn.Conv2d(cin, n, 3, 1, 1) for name, n in heads})
        self.num_down = len(channels)
        self.bottleneck_channels = bottleneck

    def bottleneck_size(self, size: int) -> int:
        side = size // 2 ** self.num_down
        return self.bottleneck_channels * side * side

    def forward(self, x):
        feats = self.decoder(self.encoder(x))
        return {name: torch.sigmoid(head(feats)) for name, head in self.heads.items()}


class UNet(nn.Module):
    """Encoder-decoder with skip connections and a dilated middle block."""

    def __init__(self, in_channels: int, out_channels: int, channels=(16, 32, 64, 64)):
        super().__init__()
        self.stem = conv_block(in_channels, channels[0])
        downs, cin = [], channels[0]
        for c in channels:
            downs.append(conv_block(cin, c, stride=2))
            cin = c
        self.downs = nn.ModuleList(downs)
        self.middle = nn.Sequential(
            nn.Conv2d(cin, cin, 3, 1, 2, dilation=2), nn.LeakyReLU(0.1),
            nn.Conv2d(cin, cin, 3, 1, 4, dilation=4), nn.LeakyReLU(0.1),
        )
        ups = []
        skips = [channels[0]] + list(channels[:-1])
        for c, skip in zip(reversed(channels), reversed(skips)):
            ups.append(Upsample(cin, skip))
            ups.append(conv_block(2 * skip, skip))
            cin = skip
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(cin, out_channels, 3, 1, 1)

    def forward(self, x):
        x = self.stem(x)
        skips = []
        for down in self.downs:
            skips.append(x)
            x = down(x)
        x = x + self.middle(x)
        for i in range(0, len(self.ups), 2):
            x = self.ups[i](x)
            x = self.ups[i + 1](torch.cat([x, skips.pop()], dim=1))
        return torch.sigmoid(self.out(x))


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
