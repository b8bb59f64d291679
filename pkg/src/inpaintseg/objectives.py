"""Training objectives and their gradient routing.

The reconstruction objective ``O`` trains box geometry and the segmenter,
the inpainting objective ``G`` trains only the proposal probabilities.  In
the default ``"separate"`` routing the quantities a term must not train are
detached inside that term, so a single backward pass over the summed loss
updates every component from its own objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import hard_box_mask, soft_box_mask
from .stn import composite, crop

ROUTING_MODES = ("separate", "joint")


@dataclass
class LossWeights:
    pixel: float = 1.0
    perceptual: float = 2.0
    prob_prior: float = 0.1
    v_prior: float = 0.25
    lambda_v: float = 0.005

    def validate(self) -> None:
        for name in ("pixel", "perceptual", "prob_prior", "v_prior", "lambda_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class RoutingPlan:
    """Which trainable groups each objective may update."""

    route_G_to: frozenset = frozenset({"probs"})
    route_O_to: frozenset = frozenset({"boxes", "segmenter"})
    frozen: frozenset = frozenset({"inpainter", "flow_inpainter"})

    def check(self) -> None:
        if self.route_G_to & self.route_O_to:
            raise ValueError(f"O and G share {sorted(self.route_G_to & self.route_O_to)}")
        if (self.route_G_to | self.route_O_to) & self.frozen:
            raise ValueError("frozen groups cannot receive gradient")


SEPARATE_ROUTING = RoutingPlan()


class PerceptualFeatures(nn.Module):
    """Frozen, randomly initialized three-stage conv feature stack.

    Weights are drawn from a fixed seed and never trained, so the features
    are identical across runs and machines.
    """

    def __init__(self, seed: int = 0, widths=(8, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for i, c in enumerate(widths):
            conv = nn.Conv2d(cin, c, 3, 1 if i == 0 else 2, 1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            conv.weight.requires_grad_(False)
            conv.bias.requires_grad_(False)
            convs.append(conv)
            cin = c
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = x - 0.5
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


@lru_cache(maxsize=4)
def default_features(seed: int = 0) -> PerceptualFeatures:
    return PerceptualFeatures(seed).eval()


def composite_loss_map(a: torch.Tensor, b: torch.Tensor, weights: Optional[LossWeights] = None,
                       phi: Optional[PerceptualFeatures] = None) -> torch.Tensor:
    """Per-pixel loss ``(B, H, W)`` whose spatial mean equals :func:`composite_loss`.

    Feature-map errors are averaged over channels and upsampled (nearest) to
    the image resolution.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    weights = weights or LossWeights()
    out = weights.pixel * ((a - b) ** 2).mean(dim=1)
    if weights.perceptual:
        phi = phi if phi is not None else default_features()
        fa, fb = phi(a), phi(b)
        size = a.shape[-2:]
        perc = 0
        for xa, xb in zip(fa, fb):
            m = ((xa - xb) ** 2).mean(dim=1, keepdim=True)
            perc = perc + F.interpolate(m, size=size, mode="nearest")[:, 0]
        out = out + weights.perceptual * perc / len(fa)
    return out


def composite_loss(a: torch.Tensor, b: torch.Tensor, weights: Optional[LossWeights] = None,
                   phi: Optional[PerceptualFeatures] = None, reduction: str = "mean") -> torch.Tensor:
    """Weighted sum of pixel MSE and feature-space MSE.

    With ``reduction="none"`` returns one value per image.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    weights = weights or LossWeights()
    per_image = weights.pixel * ((a - b) ** 2).flatten(1).mean(1)
    if weights.perceptual:
        phi = phi if phi is not None else default_features()
        fa, fb = phi(a), phi(b)
        perc = sum(((xa - xb) ** 2).flatten(1).mean(1) for xa, xb in zip(fa, fb)) / len(fa)
        per_image = per_image + weights.perceptual * perc
    if reduction == "none":
        return per_image
    return per_image.mean()


def pixel_criterion(a, b):
    return ((a - b) ** 2).mean(dim=1)


def region_loss(prediction: torch.Tensor, target: torch.Tensor, region,
                criterion=None) -> torch.Tensor:
    """Area-normalized loss inside a region, one value per image.

    ``region`` is either a ``(B, 4)`` box tensor (pixels whose centers lie in
    the box) or a ``(B, 1, H, W)`` weight map.  ``criterion(a, b)`` returns a
    per-pixel ``(B, H, W)`` map and defaults to the squared error averaged over
    color channels.  Empty regions contribute 0.
    """
    criterion = criterion or pixel_criterion
    h, w = prediction.shape[-2:]
    if region.dim() == 2:
        region = hard_box_mask(region.to(prediction.dtype), h, w)
    region = region[:, 0]
    per_pixel = criterion(prediction, target)
    area = region.flatten(1).sum(1)
    total = (per_pixel * region).flatten(1).sum(1)
    return torch.where(area > 0, total / area.clamp_min(1e-12), torch.zeros_like(total))


def make_criterion(weights: Optional[LossWeights] = None, phi: Optional[PerceptualFeatures] = None):
    def criterion(a, b):
        return composite_loss_map(a, b, weights, phi)
    return criterion


def dilate_boxes(boxes: torch.Tensor, scale: float) -> torch.Tensor:
    """Scale box extents about their centers and clip to the frame."""
    cx, cy = boxes[:, 0], boxes[:, 1]
    hw, hh = boxes[:, 2] * scale / 2, boxes[:, 3] * scale / 2
    x0, x1 = (cx - hw).clamp(0, 1), (cx + hw).clamp(0, 1)
    y0, y1 = (cy - hh).clamp(0, 1), (cy + hh).clamp(0, 1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=1)


@dataclass
class ForegroundTerms:
    loss: torch.Tensor
    per_image: torch.Tensor
    pasted_mask: torch.Tensor
    composite: torch.Tensor
    recon: torch.Tensor = field(repr=False, default=None)
    mask: torch.Tensor = field(repr=False, default=None)


def foreground_objective(frames: torch.Tensor, boxes: torch.Tensor, backgrounds: torch.Tensor,
                         segmenter, is_weight: torch.Tensor, crop_size: int,
                         weights: Optional[LossWeights] = None,
                         phi: Optional[PerceptualFeatures] = None,
                         routing: str = "separate") -> ForegroundTerms:
    """Importance-weighted reconstruction loss of the composited frame.

    ``boxes`` are the sampled candidates ``(B, 4)``, ``backgrounds`` the
    (frozen) inpaintings of their dilated regions and ``is_weight`` the
    per-image weights ``p(c)/q(c)``.  Under separate routing the weights are
    detached, so this term never trains the probabilities.
    """
    w = is_weight.detach() if routing == "separate" else is_weight
    patches = crop(frames, boxes, crop_size)
    seg = segmenter(patches)
    comp, alpha = composite(seg.recon, seg.mask, backgrounds.detach(), boxes, return_pasted_mask=True)
    per_image = composite_loss(comp, frames, weights, phi, reduction="none")
    return ForegroundTerms(loss=(w * per_image).mean(), per_image=per_image,
                           pasted_mask=alpha, composite=comp, recon=seg.recon, mask=seg.mask)


def background_objective(frames: torch.Tensor, backgrounds: torch.Tensor, region_boxes: torch.Tensor,
                         is_weight: torch.Tensor, weights: Optional[LossWeights] = None,
                         phi: Optional[PerceptualFeatures] = None, routing: str = "separate"):
    """Negative area-normalized inpainting error, weighted by ``p(c)/q(c)``.

    Returns ``(loss, per_image_region_loss)``.  Separate routing computes the
    region loss as a constant so only ``is_weight`` (hence ``p``) receives
    gradient; joint routing weights the region softly so the boxes are
    trained as well.
    """
    criterion = make_criterion(weights, phi)
    backgrounds = backgrounds.detach()
    if routing == "separate":
        with torch.no_grad():
            rl = region_loss(backgrounds, frames, region_boxes.detach(), criterion)
    else:
        h, w = frames.shape[-2:]
        rl = region_loss(backgrounds, frames, soft_box_mask(region_boxes, h, w), criterion)
    return (is_weight * -rl).mean(), rl


def flow_background_objective(flow_frames: Optional[torch.Tensor], flow_backgrounds: Optional[torch.Tensor],
                              region_boxes: torch.Tensor, is_weight: torch.Tensor,
                              weights: Optional[LossWeights] = None,
                              phi: Optional[PerceptualFeatures] = None,
                              routing: str = "separate", enabled: bool = True):
    """Inpainting objective on flow images; exactly zero when disabled."""
    if not enabled:
        zero = torch.zeros((), dtype=region_boxes.dtype)
        return zero, torch.zeros(region_boxes.shape[0], dtype=region_boxes.dtype)
    if flow_frames is None or flow_backgrounds is None:
        raise ValueError("flow mode enabled but no flow images were provided")
    return background_objective(flow_frames, flow_backgrounds, region_boxes, is_weight,
                                weights, phi, routing)


def v_prior(pasted_mask: torch.Tensor, lam: float = 0.005) -> torch.Tensor:
    """``|mean(mask) - lam| + lam`` per image."""
    mean = pasted_mask.flatten(1).mean(1)
    return (mean - lam).abs() + lam


def prob_prior(p: torch.Tensor) -> torch.Tensor:
    """``1 - sum(p^2)``: zero for one-hot ``p``, largest for uniform ``p``."""
    return 1.0 - (p ** 2).sum(-1)


def total_loss(terms: dict, weights: Optional[LossWeights] = None) -> torch.Tensor:
    """Sum of the objectives plus weighted priors.

    ``terms`` may hold scalar tensors under ``"O"``, ``"G"``, ``"G_flow"``,
    ``"prob_prior"`` and ``"v_prior"``; missing or ``None`` terms contribute 0.
    """
    weights = weights or LossWeights()
    scale = {"O": 1.0, "G": 1.0, "G_flow": 1.0,
             "prob_prior": weights.prob_prior, "v_prior": weights.v_prior}
    total = torch.zeros(())
    for name, factor in scale.items():
        value = terms.get(name)
        if value is not None:
            total = total + factor * value
    return total
