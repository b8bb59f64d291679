"""Optical-flow images used as extra training signal.

Flow is encoded as a 3-channel image in [0, 1]::

    ch0 = (dx / max_disp + 1) / 2
    ch1 = (dy / max_disp + 1) / 2
    ch2 = |d| / max_disp

so zero motion is ``(0.5, 0.5, 0)``.  Synthetic sequences get exact flow
from their known camera and sprite motion; real footage provides flow from
an external estimator as ``flow/%06d.png`` files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .inpainter import InpainterTrainConfig, train_inpainter
from .synthdata import DatasetError, SceneSample, dequantize

MAX_DISP = 16.0


def encode_flow(dx, dy, max_disp: float = MAX_DISP) -> np.ndarray:
    dx = np.clip(np.asarray(dx, dtype=np.float64), -max_disp, max_disp)
    dy = np.clip(np.asarray(dy, dtype=np.float64), -max_disp, max_disp)
    mag = np.minimum(np.hypot(dx, dy), max_disp)
    return np.stack([(dx / max_disp + 1) / 2, (dy / max_disp + 1) / 2, mag / max_disp],
                    axis=-1).astype(np.float32)


def decode_flow(image: np.ndarray, max_disp: float = MAX_DISP):
    image = np.asarray(image, dtype=np.float64)
    return (image[..., 0] * 2 - 1) * max_disp, (image[..., 1] * 2 - 1) * max_disp


def stabilize(src: np.ndarray, tgt: np.ndarray, homography: np.ndarray) -> np.ndarray:
    """Warp ``src`` into the frame of ``tgt`` with the ``src -> tgt`` homography.

    Bilinear sampling with edge clamping; ``tgt`` only fixes the output size.
    """
    h = np.asarray(homography, dtype=np.float64)
    if abs(np.linalg.det(h)) < 1e-12:
        raise np.linalg.LinAlgError("homography is singular")
    inv = np.linalg.inv(h)
    height, width = tgt.shape[:2]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    den = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    sx = (inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]) / den
    sy = (inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]) / den
    src = np.asarray(src)
    if src.ndim == 2:
        return ndimage.map_coordinates(src, [sy, sx], order=1, mode="nearest").astype(src.dtype)
    return np.stack([ndimage.map_coordinates(src[..., c], [sy, sx], order=1, mode="nearest")
                     for c in range(src.shape[-1])], axis=-1).astype(src.dtype)


def analytic_flow(sample_prev: SceneSample, sample_cur: SceneSample,
                  max_disp: float = MAX_DISP) -> np.ndarray:
    """Exact stabilized flow between consecutive synthetic frames.

    Background motion is removed by the known homography, leaving the sprite
    displacement inside the current sprite mask and zero elsewhere.
    """
    if sample_prev.frame.shape != sample_cur.frame.shape or sample_cur.index != sample_prev.index + 1:
        raise ValueError("samples are not consecutive frames of one sequence")
    dx = np.where(sample_cur.gt_mask, sample_cur.sprite_velocity[0], 0.0)
    dy = np.where(sample_cur.gt_mask, sample_cur.sprite_velocity[1], 0.0)
    return encode_flow(dx, dy, max_disp)


def attach_flow(samples: list[SceneSample], max_disp: float = MAX_DISP) -> list[SceneSample]:
    """Fill ``flow_image`` in place; frame 0 reuses the flow of frame 1."""
    for prev, cur in zip(samples[:-1], samples[1:]):
        cur.flow_image = analytic_flow(prev, cur, max_disp)
    if samples:
        first = samples[0]
        if len(samples) > 1:
            dx = np.where(first.gt_mask, first.sprite_velocity[0], 0.0)
            dy = np.where(first.gt_mask, first.sprite_velocity[1], 0.0)
            first.flow_image = encode_flow(dx, dy, max_disp)
        else:
            first.flow_image = encode_flow(np.zeros(first.gt_mask.shape), np.zeros(first.gt_mask.shape))
    return samples


def ingest_flow(directory, num_frames: Optional[int] = None):
    """Load ``flow/%06d.png`` images of a dataset directory.

    Returns ``None`` when the directory has no ``flow/`` folder (flow mode
    unavailable); otherwise a list of float images aligned with the frames.

    Raises:
        DatasetError: a flow image for some frame index is missing.
    """
    root = Path(directory)
    flow_dir = root / "flow" if (root / "flow").is_dir() else root
    if not flow_dir.is_dir() or not any(flow_dir.glob("*.png")):
        return None
    if num_frames is None:
        manifest = root / "manifest.json"
        if manifest.exists():
            num_frames = len(json.loads(manifest.read_text())["frames"])
        else:
            num_frames = len(list(flow_dir.glob("*.png")))
    flows = []
    for i in range(num_frames):
        path = flow_dir / f"{i:06d}.png"
        if not path.exists():
            raise DatasetError(f"missing flow {i}")
        with Image.open(path) as im:
            flows.append(dequantize(np.asarray(im)))
    return flows


def train_flow_inpainter(flow_frames: np.ndarray, config: Optional[InpainterTrainConfig] = None,
                         seed: int = 0, **kwargs):
    """Train an inpainter on encoded flow images (same procedure as for RGB)."""
    return train_inpainter(flow_frames, config, seed, **kwargs)
