"""Region inpainting network and its self-supervised training.

The network sees the frame with a rectangular hole (color zeroed, plus a
binary hole channel) and synthesizes the hole from its surroundings.  Pixels
outside the hole are copied from the input, so only the hole is ever
predicted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .boxes import BoxGeometry, hard_box_mask
from .nets import UNet
from .objectives import LossWeights, dilate_boxes, make_criterion, region_loss

log = logging.getLogger(__name__)


@dataclass
class ErasedInput:
    pixels: torch.Tensor      # (B, 4, H, W): color with hole zeroed + hole channel
    erase_box: torch.Tensor   # (B, 4) dilated, clipped box actually erased

    @property
    def hole(self) -> torch.Tensor:
        return self.pixels[:, 3:4]

    @property
    def color(self) -> torch.Tensor:
        return self.pixels[:, :3]


def erase(frames: torch.Tensor, boxes, scale: float = 1.0) -> ErasedInput:
    """Zero the (``scale``-dilated, clipped) box region of each frame.

    ``frames`` is ``(B, 3, H, W)``; ``boxes`` a ``(B, 4)`` tensor or a single
    :class:`BoxGeometry`.
    """
    if scale <= 0:
        raise ValueError("scale must be > 0")
    if isinstance(boxes, BoxGeometry):
        boxes = torch.from_numpy(np.array([boxes.to_array()])).to(frames.dtype).expand(frames.shape[0], 4)
    boxes = dilate_boxes(boxes.detach().to(frames.dtype), scale)
    h, w = frames.shape[-2:]
    hole = hard_box_mask(boxes, h, w)
    color = frames * (1 - hole)
    return ErasedInput(pixels=torch.cat([color, hole], dim=1), erase_box=boxes)


class Inpainter(nn.Module):
    def __init__(self, channels=(8, 16, 32, 64), image_channels: int = 3):
        super().__init__()
        self.net = UNet(image_channels + 1, image_channels, channels)

    def forward(self, erased: ErasedInput) -> torch.Tensor:
        pred = self.net(erased.pixels)
        return torch.where(erased.hole > 0.5, pred, erased.color)


def inpaint(erased: ErasedInput, inpainter: Inpainter) -> torch.Tensor:
    with torch.no_grad():
        return inpainter(erased)


def random_boxes(n: int, scale_min: float, scale_max: float,
                 generator: torch.Generator) -> torch.Tensor:
    """Boxes with extents uniform in ``[scale_min, scale_max]`` lying fully inside the frame."""
    wh = scale_min + torch.rand(n, 2, generator=generator, dtype=torch.float64) * (scale_max - scale_min)
    c = wh / 2 + torch.rand(n, 2, generator=generator, dtype=torch.float64) * (1 - wh)
    return torch.cat([c, wh], dim=1).float()


@dataclass
class InpainterTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    scale_min: float = 0.2
    scale_max: float = 0.8
    erase_scale: float = 1.1
    channels: tuple = (8, 16, 32, 64)
    log_every: int = 100


def to_float_frames(frames: np.ndarray, idx) -> torch.Tensor:
    """Select ``(N, H, W, C)`` uint8 frames and convert to NCHW floats."""
    batch = torch.from_numpy(np.ascontiguousarray(frames[idx]))
    return batch.permute(0, 3, 1, 2).float() / 255.0


def train_inpainter(frames: np.ndarray, config: Optional[InpainterTrainConfig] = None,
                    seed: int = 0, weights: Optional[LossWeights] = None,
                    inpainter: Optional[Inpainter] = None, callback=None) -> Inpainter:
    """Self-supervised inpainter training on random rectangular holes.

    Args:
        frames: ``(N, H, W, C)`` uint8 frames (RGB or encoded flow).
        config: schedule and box statistics.
        seed: seeds initialization, batch order and holes.
        callback: optional ``callback(step, loss)`` called every step.
    """
    config = config or InpainterTrainConfig()
    if len(frames) == 0:
        raise ValueError("cannot train an inpainter on an empty dataset")
    gen = torch.Generator().manual_seed(seed)
    if inpainter is None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            inpainter = Inpainter(config.channels, image_channels=frames.shape[-1])
    model = inpainter
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    criterion = make_criterion(weights)
    model.train()
    for step in range(config.steps):
        idx = torch.randint(len(frames), (config.batch_size,), generator=gen).numpy()
        batch = to_float_frames(frames, idx)
        boxes = random_boxes(config.batch_size, config.scale_min, config.scale_max, gen)
        erased = erase(batch, boxes, config.erase_scale)
        pred = model(erased)
        loss = region_loss(pred, batch, erased.hole, criterion).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = loss.item()
        if callback is not None:
            callback(step, value)
        if config.log_every and step % config.log_every == 0:
            log.info("inpainter step %d loss %.5f", step, value)
    model.eval()
    return model


@torch.no_grad()
def evaluate_inpainter(model: Inpainter, frames: np.ndarray, boxes: torch.Tensor,
                       weights: Optional[LossWeights] = None, erase_scale: float = 1.0,
                       batch_size: int = 32) -> np.ndarray:
    """Per-frame region loss for the given holes (one box per frame)."""
    criterion = make_criterion(weights)
    out = []
    for start in range(0, len(frames), batch_size):
        idx = np.arange(start, min(start + batch_size, len(frames)))
        batch = to_float_frames(frames, idx)
        erased = erase(batch, boxes[idx], erase_scale)
        pred = model(erased)
        out.append(region_loss(pred, batch, erased.hole, criterion))
    return torch.cat(out).numpy()
