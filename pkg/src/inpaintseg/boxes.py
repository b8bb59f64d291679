"""Normalized axis-aligned boxes.

Coordinates are normalized so that ``u = 0`` is the center of the first
pixel and ``u = 1`` the center of the last one, i.e. pixel ``x`` sits at
``u = x / (size - 1)``.  This matches ``align_corners=True`` sampling used by
the spatial transformers, so a box ``(0.5, 0.5, 1, 1)`` spans every pixel
center of the frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class BoxGeometry:
    """Center/extent rectangle in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "BoxGeometry":
        cx, cy, w, h = (float(v) for v in np.asarray(values, dtype=np.float64).reshape(4))
        return cls(cx, cy, w, h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return ``(x0, y0, x1, y1)`` in normalized coordinates."""
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def scaled(self, factor: float) -> "BoxGeometry":
        return BoxGeometry(self.cx, self.cy, self.w * factor, self.h * factor)

    def clipped(self) -> "BoxGeometry":
        """Intersect with the unit square; empty intersections give zero extent."""
        x0, y0, x1, y1 = self.corners()
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, 1.0), min(y1, 1.0)
        w, h = max(x1 - x0, 0.0), max(y1 - y0, 0.0)
        return BoxGeometry((x0 + x1) / 2, (y0 + y1) / 2, w, h)

    def pixel_mask(self, height: int, width: int) -> np.ndarray:
        """Boolean mask of the pixels whose centers lie inside the box."""
        return box_pixel_mask(self.to_array(), height, width)


def box_pixel_mask(box, height: int, width: int) -> np.ndarray:
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    if w <= 0 or h <= 0:
        return np.zeros((height, width), dtype=bool)
    u = np.arange(width) / max(width - 1, 1)
    v = np.arange(height) / max(height - 1, 1)
    # small tolerance so boxes built from pixel centers include their end pixels
    tol = 1e-9
    in_x = (u >= cx - w / 2 - tol) & (u <= cx + w / 2 + tol)
    in_y = (v >= cy - h / 2 - tol) & (v <= cy + h / 2 + tol)
    return in_y[:, None] & in_x[None, :]


def box_from_mask(mask: np.ndarray) -> BoxGeometry:
    """Tight box around a binary mask, extended half a pixel past the outer centers.

    The half-pixel margin gives a nonzero extent for single-pixel masks while
    keeping :func:`box_pixel_mask` equal to the tight bounding rectangle.
    """
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return BoxGeometry(0.0, 0.0, 0.0, 0.0)
    sx, sy = max(width - 1, 1), max(height - 1, 1)
    x0, x1 = (xs.min() - 0.5) / sx, (xs.max() + 0.5) / sx
    y0, y1 = (ys.min() - 0.5) / sy, (ys.max() + 0.5) / sy
    return BoxGeometry(float((x0 + x1) / 2), float((y0 + y1) / 2), float(x1 - x0), float(y1 - y0))


def box_iou(a, b) -> float:
    """Intersection over union of two ``(cx, cy, w, h)`` boxes."""
    a = BoxGeometry.from_array(a.to_array() if isinstance(a, BoxGeometry) else a)
    b = BoxGeometry.from_array(b.to_array() if isinstance(b, BoxGeometry) else b)
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def soft_box_mask(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Differentiable box indicator, shape ``(B, 1, H, W)``.

    Each axis uses a unit-slope ramp (in pixels) around the box edges, so the
    total weight approximates the box area in pixels and carries gradient to
    all four box parameters.
    """
    sx, sy = max(width - 1, 1), max(height - 1, 1)
    xs = torch.arange(width, dtype=boxes.dtype, device=boxes.device)
    ys = torch.arange(height, dtype=boxes.dtype, device=boxes.device)
    cx, cy = boxes[:, 0:1] * sx, boxes[:, 1:2] * sy
    hw, hh = boxes[:, 2:3] * sx / 2, boxes[:, 3:4] * sy / 2
    mx = torch.clamp(hw - (xs[None] - cx).abs() + 0.5, 0.0, 1.0)
    my = torch.clamp(hh - (ys[None] - cy).abs() + 0.5, 0.0, 1.0)
    return (my[:, :, None] * mx[:, None, :]).unsqueeze(1)


def hard_box_mask(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Pixel-center membership mask for a batch of boxes, shape ``(B, 1, H, W)``."""
    sx, sy = max(width - 1, 1), max(height - 1, 1)
    u = torch.arange(width, dtype=boxes.dtype, device=boxes.device) / sx
    v = torch.arange(height, dtype=boxes.dtype, device=boxes.device) / sy
    tol = 1e-9
    x0 = (boxes[:, 0:1] - boxes[:, 2:3] / 2) - tol
    x1 = (boxes[:, 0:1] + boxes[:, 2:3] / 2) + tol
    y0 = (boxes[:, 1:2] - boxes[:, 3:4] / 2) - tol
    y1 = (boxes[:, 1:2] + boxes[:, 3:4] / 2) + tol
    in_x = (u[None] >= x0) & (u[None] <= x1)
    in_y = (v[None] >= y0) & (v[None] <= y1)
    nonempty = ((boxes[:, 2] > 0) & (boxes[:, 3] > 0))[:, None, None]
    mask = in_y[:, :, None] & in_x[:, None, :] & nonempty
    return mask.unsqueeze(1).to(boxes.dtype)
