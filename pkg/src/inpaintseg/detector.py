"""Grid proposal detector.

A fully-convolutional trunk maps a frame to a ``grid_h x grid_w`` feature
map.  Every cell emits five raw values ``(dx, dy, w, h, logit)`` that decode
into one candidate box, and a softmax over all cell logits gives the
categorical proposal distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .boxes import BoxGeometry
from .nets import conv_block

OFFSET_BASES = ("cell", "box")
HEAD_MODES = ("proposal", "direct_regression")


class ConfigurationError(ValueError):
    pass


@dataclass
class DetectorConfig:
    grid_h: int = 8
    grid_w: int = 8
    scale_min: float = 0.2
    scale_max: float = 0.8
    offset_limit_factor: float = 1.5
    # "cell": offsets limited to factor * cell width; "box": factor * decoded box width
    offset_limit_basis: str = "cell"
    channels: tuple = (16, 32, 64, 64, 64)

    @property
    def num_cells(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        if not 0 < self.scale_min < self.scale_max <= 1:
            raise ConfigurationError("need 0 < scale_min < scale_max <= 1")
        if self.offset_limit_factor <= 0:
            raise ConfigurationError("offset_limit_factor must be > 0")
        if self.offset_limit_basis not in OFFSET_BASES:
            raise ConfigurationError(f"offset_limit_basis must be one of {OFFSET_BASES}")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ConfigurationError("grid dims must be positive")


@dataclass
class ProposalSet:
    """Candidate boxes ``(B, C, 4)`` plus logits and softmax probabilities ``(B, C)``."""

    boxes: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor

    @property
    def num_cells(self) -> int:
        return self.probs.shape[-1]

    def box(self, cell: int, image: int = 0) -> BoxGeometry:
        return BoxGeometry.from_array(self.boxes[image, cell].detach().cpu().numpy())


def cell_centers(grid_h: int, grid_w: int, dtype=torch.float32):
    rows, cols = torch.meshgrid(torch.arange(grid_h, dtype=dtype),
                                torch.arange(grid_w, dtype=dtype), indexing="ij")
    return ((cols + 0.5) / grid_w).reshape(-1), ((rows + 0.5) / grid_h).reshape(-1)


def decode(raw: torch.Tensor, config: DetectorConfig):
    """Decode raw head outputs ``(B, 5, gh, gw)`` into boxes ``(B, C, 4)`` and logits ``(B, C)``."""
    b, _, gh, gw = raw.shape
    raw = raw.reshape(b, 5, gh * gw)
    ccx, ccy = cell_centers(gh, gw, raw.dtype)
    span = config.scale_max - config.scale_min
    w = config.scale_min + torch.sigmoid(raw[:, 2]) * span
    h = config.scale_min + torch.sigmoid(raw[:, 3]) * span
    if config.offset_limit_basis == "cell":
        lim_x = config.offset_limit_factor / gw
        lim_y = config.offset_limit_factor / gh
    else:
        lim_x, lim_y = config.offset_limit_factor * w, config.offset_limit_factor * h
    cx = torch.clamp(ccx + torch.tanh(raw[:, 0]) * lim_x, 0.0, 1.0)
    cy = torch.clamp(ccy + torch.tanh(raw[:, 1]) * lim_y, 0.0, 1.0)
    boxes = torch.stack([cx, cy, w, h], dim=-1)
    return boxes, raw[:, 4]


def decode_cell(raw, cell_index: int, config: DetectorConfig):
    """Decode the five raw values of one cell; returns ``(BoxGeometry, logit)``."""
    if not 0 <= cell_index < config.num_cells:
        raise IndexError(f"cell_index {cell_index} outside [0, {config.num_cells})")
    raw = torch.as_tensor(np.asarray(raw, dtype=np.float64))
    full = torch.zeros(1, 5, config.num_cells, dtype=torch.float64)
    full[0, :, cell_index] = raw
    boxes, logits = decode(full.reshape(1, 5, config.grid_h, config.grid_w), config)
    return BoxGeometry.from_array(boxes[0, cell_index].numpy()), float(logits[0, cell_index])


class Detector(nn.Module):
    """Proposal detector for square frames of side ``image_size``.

    The trunk has ``len(config.channels)`` conv stages; the first
    ``log2(image_size / grid)`` of them have stride 2.
    """

    def __init__(self, config: Optional[DetectorConfig] = None, image_size: int = 128,
                 head_mode: str = "proposal"):
        super().__init__()
        config = config or DetectorConfig()
        config.validate()
        if head_mode not in HEAD_MODES:
            raise ConfigurationError(f"head_mode must be one of {HEAD_MODES}")
        if image_size % config.grid_h or image_size % config.grid_w or config.grid_h != config.grid_w:
            raise ConfigurationError(
                f"image size {image_size} must be divisible by a square grid, "
                f"got {config.grid_h}x{config.grid_w}")
        ratio = image_size // config.grid_h
        n_down = int(round(math.log2(ratio)))
        if 2 ** n_down != ratio or n_down > len(config.channels):
            raise ConfigurationError(
                f"image/grid ratio {ratio} must be a power of two <= 2**{len(config.channels)}")
        self.config = config
        self.image_size = image_size
        self.head_mode = head_mode
        layers, cin = [], 3
        for i, c in enumerate(config.channels):
            layers.append(conv_block(cin, c, stride=2 if i < n_down else 1))
            cin = c
        self.trunk = nn.Sequential(*layers)
        if head_mode == "proposal":
            # separate heads so box and probability parameters never share weights
            self.box_head = nn.Conv2d(cin, 4, 3, 1, 1)
            self.prob_head = nn.Conv2d(cin, 1, 3, 1, 1)
        else:
            self.box_head = nn.Linear(cin, 4)
            self.prob_head = None
        nn.init.zeros_(self.box_head.weight)
        nn.init.zeros_(self.box_head.bias)
        if self.prob_head is not None:
            nn.init.normal_(self.prob_head.weight, std=1e-3)
            nn.init.zeros_(self.prob_head.bias)

    def raw_outputs(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.image_size or frames.shape[-2] != self.image_size:
            raise ConfigurationError(
                f"expected {self.image_size}x{self.image_size} frames, got {tuple(frames.shape[-2:])}")
        feats = self.trunk(frames)
        if self.head_mode == "proposal":
            return torch.cat([self.box_head(feats), self.prob_head(feats)], dim=1)
        pooled = feats.mean(dim=(2, 3))
        raw = torch.cat([self.box_head(pooled), torch.zeros_like(pooled[:, :1])], dim=1)
        return raw[:, :, None, None]

    def proposals_from_raw(self, raw: torch.Tensor) -> ProposalSet:
        if self.head_mode == "proposal":
            boxes, logits = decode(raw, self.config)
        else:
            single = DetectorConfig(1, 1, self.config.scale_min, self.config.scale_max,
                                    offset_limit_factor=0.5)
            boxes, logits = decode(raw, single)
        return ProposalSet(boxes=boxes, logits=logits, probs=torch.softmax(logits, dim=-1))

    def forward(self, frames: torch.Tensor) -> ProposalSet:
        return self.proposals_from_raw(self.raw_outputs(frames))


def frame_tensor(frame) -> torch.Tensor:
    """``H x W x 3`` array (or ``(N, H, W, 3)``) in [0, 1] to an NCHW float tensor."""
    arr = torch.as_tensor(np.asarray(frame, dtype=np.float32))
    if arr.dim() == 3:
        arr = arr[None]
    return arr.permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def detect(frame, detector: Detector) -> ProposalSet:
    return detector(frame_tensor(frame))


def sample_top_k(proposals: ProposalSet, k: int, image: int = 0) -> list[BoxGeometry]:
    """The ``k`` most probable boxes of one image, ties broken by lower cell index."""
    if k <= 0:
        return []
    probs = proposals.probs[image].detach().cpu().numpy()
    if k > len(probs):
        raise ValueError(f"k={k} exceeds the number of cells {len(probs)}")
    order = np.lexsort((np.arange(len(probs)), -probs))[:k]
    return [proposals.box(int(c), image) for c in order]


def top_k_cells(probs: torch.Tensor, k: int) -> list[int]:
    p = probs.detach().cpu().numpy()
    return [int(c) for c in np.lexsort((np.arange(len(p)), -p))[:k]]
