"""Differentiable crop, paste and foreground/background compositing.

Boxes are ``(B, 4)`` tensors of normalized ``(cx, cy, w, h)`` (see
:mod:`inpaintseg.boxes`).  Both transformers use bilinear sampling with
``align_corners=True`` so that a full-frame box at the frame resolution is an
exact identity.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _as_batch(boxes: torch.Tensor) -> torch.Tensor:
    return boxes.reshape(-1, 4)


def crop_grid(boxes: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    boxes = _as_batch(boxes)
    n = boxes.shape[0]
    zero = torch.zeros_like(boxes[:, 0])
    theta = torch.stack([
        torch.stack([boxes[:, 2], zero, 2 * boxes[:, 0] - 1], dim=1),
        torch.stack([zero, boxes[:, 3], 2 * boxes[:, 1] - 1], dim=1),
    ], dim=1)
    return F.affine_grid(theta, [n, 1, out_h, out_w], align_corners=True)


def paste_grid(boxes: torch.Tensor, canvas_h: int, canvas_w: int) -> torch.Tensor:
    boxes = _as_batch(boxes)
    n = boxes.shape[0]
    zero = torch.zeros_like(boxes[:, 0])
    inv_w, inv_h = 1.0 / boxes[:, 2], 1.0 / boxes[:, 3]
    theta = torch.stack([
        torch.stack([inv_w, zero, -(2 * boxes[:, 0] - 1) * inv_w], dim=1),
        torch.stack([zero, inv_h, -(2 * boxes[:, 1] - 1) * inv_h], dim=1),
    ], dim=1)
    return F.affine_grid(theta, [n, 1, canvas_h, canvas_w], align_corners=True)


def crop(frames: torch.Tensor, boxes: torch.Tensor, out_size) -> torch.Tensor:
    """Resample the box region of each frame to ``out_size``.

    Samples falling outside the frame read the nearest edge pixel.
    """
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    grid = crop_grid(boxes.to(frames.dtype), *out_size)
    return F.grid_sample(frames, grid, mode="bilinear", padding_mode="border",
                         align_corners=True)


def paste(patches: torch.Tensor, boxes: torch.Tensor, canvas_size) -> torch.Tensor:
    """Inverse of :func:`crop`: place patches back into full-size canvases.

    Canvas pixels farther than one patch pixel outside the box are exactly 0.
    """
    if isinstance(canvas_size, int):
        canvas_size = (canvas_size, canvas_size)
    grid = paste_grid(boxes.to(patches.dtype), *canvas_size)
    return F.grid_sample(patches, grid, mode="bilinear", padding_mode="zeros",
                         align_corners=True)


def composite(recon: torch.Tensor, mask: torch.Tensor, background: torch.Tensor,
              boxes: torch.Tensor, return_pasted_mask: bool = False):
    """Blend a pasted foreground over ``background`` using the pasted mask.

    ``recon`` is ``(B, 3, s, s)``, ``mask`` is ``(B, 1, s, s)`` with values in
    [0, 1], ``background`` is ``(B, 3, H, W)``.
    """
    if mask.numel() and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    size = background.shape[-2:]
    fg = paste(recon, boxes, size)
    alpha = paste(mask, boxes, size)
    out = fg * alpha + background * (1 - alpha)
    if return_pasted_mask:
        return out, alpha
    return out
