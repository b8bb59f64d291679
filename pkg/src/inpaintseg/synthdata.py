"""Synthetic moving-sprite sequences and the on-disk dataset format.

A sequence shows a textured background seen by a (possibly moving) camera
and a single textured sprite that travels across the frame.  Generation is
a pure function of ``(SceneConfig, seed)``; the background and sprite
textures come from their own seeds so that several trajectories can share
one scene.

Dataset layout::

    manifest.json
    frames/000000.png
    masks/000000.png
    flow/000000.png      (optional)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import BoxGeometry, box_from_mask

CAMERA_MOTIONS = ("static", "rotation_homography", "translation")
SPRITE_SHAPES = ("ellipse", "polygon")

BG_RANGE = (0.05, 0.55)


class InvariantError(ValueError):
    """A scene configuration or generated sequence breaks a named invariant."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 128
    num_frames: int = 64
    sprite_shape: str = "ellipse"
    sprite_scale: float = 0.25
    sprite_speed: float = 2.0
    camera_motion: str = "static"
    # largest per-frame corner displacement, as a fraction of the image size
    camera_magnitude: float = 0.02
    background_texture_seed: int = 0
    sprite_texture_seed: int = 1
    contrast_gap: float = 0.25
    # off only for degenerate fixtures (e.g. a motionless sprite)
    enforce_assumptions: bool = True

    @property
    def sprite_width_px(self) -> float:
        return self.sprite_scale * self.image_size

    def validate(self) -> None:
        if self.sprite_shape not in SPRITE_SHAPES:
            raise ValueError(f"unknown sprite_shape {self.sprite_shape!r}")
        if self.camera_motion not in CAMERA_MOTIONS:
            raise ValueError(f"unknown camera_motion {self.camera_motion!r}")
        if self.image_size < 8 or self.num_frames < 1:
            raise ValueError("image_size must be >= 8 and num_frames >= 1")
        if not 0.1 <= self.sprite_scale <= 0.5:
            raise InvariantError("sprite_scale", f"{self.sprite_scale} outside [0.1, 0.5]")
        if not 0.0 <= self.camera_magnitude <= 0.02:
            raise InvariantError("camera_magnitude",
                                 f"{self.camera_magnitude} outside [0, 0.02]")
        if not self.enforce_assumptions:
            return
        if not 0.0 < self.contrast_gap <= 1.0:
            raise InvariantError("A2_contrast", f"contrast_gap must be in (0, 1], got {self.contrast_gap}")
        displacement = self.sprite_speed * (self.num_frames - 1)
        if displacement < self.sprite_width_px:
            raise InvariantError(
                "min_displacement",
                f"sprite travels {displacement:.1f} px, less than its width "
                f"{self.sprite_width_px:.1f} px")


@dataclass
class SceneSample:
    frame: np.ndarray                 # H x W x 3 float32 in [0, 1]
    gt_mask: np.ndarray               # H x W bool
    gt_box: BoxGeometry
    homography: np.ndarray            # 3 x 3, previous frame -> this frame
    sprite_velocity: np.ndarray       # (vx, vy) pixels/frame
    flow_image: Optional[np.ndarray] = None
    index: int = 0


def quantize(image: np.ndarray) -> np.ndarray:
    """8-bit quantization with round-half-up, as stored in PNG files."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# textures


def value_noise(rng: np.random.Generator, size: int, channels: int,
                base: int = 4, octaves: int = 4) -> np.ndarray:
    """Multi-octave value noise in [0, 1], shape ``(size, size, channels)``."""
    out = np.zeros((size, size, channels))
    total = 0.0
    for octave in range(octaves):
        cells = base * 2 ** octave
        grid = rng.random((cells + 1, cells + 1, channels))
        zoom = size / cells
        up = ndimage.zoom(grid, (zoom, zoom, 1), order=3, mode="nearest", grid_mode=False)
        amp = 0.5 ** octave
        out += amp * up[:size, :size]
        total += amp
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / max(hi - lo, 1e-12)


def background_texture(seed: int, size: int) -> np.ndarray:
    """Value noise plus 3-6 soft colored blobs, rescaled into ``BG_RANGE``."""
    rng = np.random.default_rng(seed)
    lum = value_noise(rng, size, 1)
    tint = value_noise(rng, size, 3, base=2, octaves=2)
    tex = 0.7 * lum + 0.3 * tint
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(3, 7))):
        cx, cy = rng.uniform(0, size, 2)
        rx, ry = rng.uniform(0.08, 0.25, 2) * size
        color = rng.uniform(0.0, 1.0, 3)
        d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
        alpha = 0.6 / (1.0 + np.exp((d - 1.0) * 6.0))
        tex = tex * (1 - alpha[..., None]) + color * alpha[..., None]
    lo, hi = BG_RANGE
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-12)
    return lo + (hi - lo) * tex


def sprite_texture(seed: int, size: int, mean_intensity: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = value_noise(rng, size, 3, base=2, octaves=3) - 0.5
    hue = rng.uniform(-0.08, 0.08, 3)
    hue -= hue.mean()
    tex = mean_intensity + hue + 0.3 * noise
    tex += mean_intensity - tex.mean()
    return np.clip(tex, 0.0, 1.0)


def _sprite_footprint(shape: str, seed: int, half_w: float):
    """Return ``inside(dx, dy) -> bool array`` and the half extents (hx, hy)."""
    rng = np.random.default_rng(seed + 7919)
    if shape == "ellipse":
        aspect = rng.uniform(0.75, 1.35)
        a, b = half_w, half_w * aspect

        def inside(dx, dy):
            return (dx / a) ** 2 + (dy / b) ** 2 <= 1.0

        return inside, (a, b)

    k = int(rng.integers(5, 9))
    angles = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(-0.3, 0.3, k) * (np.pi / k)
    radii = rng.uniform(0.6, 1.0, k)
    radii[int(np.argmax(radii))] = 1.0
    vx = half_w * radii * np.cos(angles)
    vy = half_w * radii * np.sin(angles)

    def inside(dx, dy):
        theta = np.mod(np.arctan2(dy, dx) - angles[0], 2 * np.pi)
        rel = np.mod(angles - angles[0], 2 * np.pi)
        sector = np.searchsorted(rel, theta, side="right") - 1
        nxt = (sector + 1) % k
        ax, ay, bx, by = vx[sector], vy[sector], vx[nxt], vy[nxt]
        # same side of edge a->b as the origin
        cross_p = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
        cross_o = (bx - ax) * (0 - ay) - (by - ay) * (0 - ax)
        return cross_p * cross_o >= 0

    return inside, (half_w, half_w)


# ---------------------------------------------------------------------------
# camera


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear solve for the homography mapping 4 ``src`` points to ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    sol = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(sol, 1.0).reshape(3, 3)


def apply_homography(h: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    den = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    return ((h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / den,
            (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / den)


def _camera_path(config: SceneConfig, rng: np.random.Generator, margin: int) -> list[np.ndarray]:
    """Image->canvas homographies, one per frame (mean-reverting random walk)."""
    s = config.image_size
    corners = np.array([[0, 0], [s - 1, 0], [s - 1, s - 1], [0, s - 1]], dtype=np.float64)
    step_max = config.camera_magnitude * s
    offsets = np.zeros((4, 2))
    mats = []
    for _ in range(config.num_frames):
        if config.camera_motion == "rotation_homography":
            step = np.clip(rng.normal(0, step_max / 2, (4, 2)), -step_max, step_max)
        elif config.camera_motion == "translation":
            step = np.repeat(np.clip(rng.normal(0, step_max / 2, (1, 2)), -step_max, step_max), 4, 0)
        else:
            step = np.zeros((4, 2))
        offsets = np.clip(0.95 * offsets + step, -margin + 1, margin - 1)
        mats.append(homography_from_points(corners, corners + margin + offsets))
    return mats


# ---------------------------------------------------------------------------
# generation


def generate_sequence(config: SceneConfig, seed: int) -> list[SceneSample]:
    """Render ``config.num_frames`` frames with ground truth.

    Raises:
        InvariantError: the config, or the rendered sequence, violates one of
            the displacement, coverage (A1) or contrast (A2) assumptions.
    """
    config.validate()
    s = config.image_size
    rng = np.random.default_rng(seed)
    moving = config.camera_motion != "static"
    margin = int(math.ceil(0.25 * s)) if moving else 0
    canvas = background_texture(config.background_texture_seed, s + 2 * margin)

    half_w = config.sprite_width_px / 2
    inside, (hx, hy) = _sprite_footprint(config.sprite_shape, config.sprite_texture_seed, half_w)
    bg_mean = float(canvas.mean())
    sprite_mean = min(0.95, bg_mean + config.contrast_gap + 0.2)
    patch = int(math.ceil(2 * max(hx, hy))) + 4
    tex = sprite_texture(config.sprite_texture_seed, patch, sprite_mean)

    cameras = _camera_path(config, rng, margin)
    lo = np.array([hx + 1, hy + 1])
    hi = np.array([s - 2 - hx, s - 2 - hy])
    if np.any(hi < lo):
        raise InvariantError("sprite_fits", "sprite larger than the frame")
    pos = rng.uniform(lo, hi)
    theta = rng.uniform(0, 2 * np.pi)
    positions, velocities = [], []
    prev = pos.copy()
    for t in range(config.num_frames):
        if t > 0:
            theta += rng.normal(0, 0.05)
            pos = pos + config.sprite_speed * np.array([np.cos(theta), np.sin(theta)])
            for axis in (0, 1):
                if pos[axis] < lo[axis]:
                    pos[axis] = 2 * lo[axis] - pos[axis]
                    theta = np.pi - theta if axis == 0 else -theta
                elif pos[axis] > hi[axis]:
                    pos[axis] = 2 * hi[axis] - pos[axis]
                    theta = np.pi - theta if axis == 0 else -theta
                pos[axis] = np.clip(pos[axis], lo[axis], hi[axis])
            velocities.append(pos - prev)
        else:
            velocities.append(config.sprite_speed * np.array([np.cos(theta), np.sin(theta)]))
        positions.append(pos.copy())
        prev = pos.copy()

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    samples = []
    prev_cam = cameras[0]
    for t in range(config.num_frames):
        cam = cameras[t]
        cx_img, cy_img = apply_homography(cam, xx, yy)
        frame = np.stack([ndimage.map_coordinates(canvas[..., ch], [cy_img, cx_img],
                                                  order=1, mode="nearest")
                          for ch in range(3)], axis=-1)
        px, py = positions[t]
        dx, dy = xx - px, yy - py
        mask = inside(dx, dy)
        tx, ty = dx + patch / 2, dy + patch / 2
        sprite = np.stack([ndimage.map_coordinates(tex[..., ch], [ty, tx], order=1, mode="nearest")
                           for ch in range(3)], axis=-1)
        frame = np.where(mask[..., None], sprite, frame)
        frame = quantize(frame)
        h = np.linalg.inv(cam) @ prev_cam
        h = h / h[2, 2]
        if t == 0:
            h = np.eye(3)
        samples.append(SceneSample(
            frame=dequantize(frame),
            gt_mask=mask,
            gt_box=box_from_mask(mask),
            homography=h,
            sprite_velocity=np.asarray(velocities[t], dtype=np.float64),
            index=t,
        ))
        prev_cam = cam

    if config.enforce_assumptions:
        check_coverage(samples, cameras, canvas.shape[0])
        check_contrast(samples, config)
    return samples


def coverage_counts(samples: list[SceneSample], cameras: list[np.ndarray], canvas_size: int):
    """Per background (canvas) pixel: frames in which it is covered / visible-uncovered."""
    s = samples[0].frame.shape[0]
    yy, xx = np.mgrid[0:canvas_size, 0:canvas_size].astype(np.float64)
    covered = np.zeros((canvas_size, canvas_size), dtype=np.int64)
    uncovered = np.zeros_like(covered)
    for sample, cam in zip(samples, cameras):
        ix, iy = apply_homography(np.linalg.inv(cam), xx, yy)
        ix, iy = np.rint(ix).astype(np.int64), np.rint(iy).astype(np.int64)
        visible = (ix >= 0) & (ix < s) & (iy >= 0) & (iy < s)
        hit = np.zeros_like(visible)
        hit[visible] = sample.gt_mask[iy[visible], ix[visible]]
        covered += hit
        uncovered += visible & ~hit
    return covered, uncovered


def check_coverage(samples, cameras, canvas_size) -> None:
    covered, uncovered = coverage_counts(samples, cameras, canvas_size)
    seen = (covered + uncovered) > 0
    bad = seen & (uncovered <= covered)
    if bad.any():
        raise InvariantError(
            "A1_coverage",
            f"{int(bad.sum())} background pixels are covered at least as often as uncovered")


def annulus(mask: np.ndarray, width_px: float) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~mask)
    return (dist > 0) & (dist <= width_px)


def contrast_gaps(samples: list[SceneSample], config: SceneConfig) -> np.ndarray:
    gaps = []
    for sample in samples:
        lum = sample.frame.mean(axis=-1)
        ring = annulus(sample.gt_mask, 2 * config.sprite_width_px)
        gaps.append(abs(lum[sample.gt_mask].mean() - lum[ring].mean()))
    return np.asarray(gaps)


def check_contrast(samples, config) -> None:
    gaps = contrast_gaps(samples, config)
    worst = int(np.argmin(gaps))
    if gaps[worst] < config.contrast_gap:
        raise InvariantError(
            "A2_contrast",
            f"frame {worst}: sprite/background intensity gap {gaps[worst]:.3f} "
            f"< contrast_gap {config.contrast_gap}")


# ---------------------------------------------------------------------------
# dataset directory


def save_dataset(samples: list[SceneSample], directory) -> dict:
    """Write frames, masks, optional flow and ``manifest.json``; return the manifest."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    has_flow = bool(samples) and all(s.flow_image is not None for s in samples)
    if has_flow:
        (root / "flow").mkdir(exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        Image.fromarray(quantize(sample.frame)).save(root / "frames" / f"{i:06d}.png")
        Image.fromarray(sample.gt_mask.astype(np.uint8) * 255).save(root / "masks" / f"{i:06d}.png")
        if has_flow:
            Image.fromarray(quantize(sample.flow_image)).save(root / "flow" / f"{i:06d}.png")
        entries.append({
            "index": i,
            "box": [float(v) for v in sample.gt_box.to_array()],
            "homography": [float(v) for v in np.asarray(sample.homography).reshape(9)],
            "sprite_velocity": [float(v) for v in sample.sprite_velocity],
        })
    manifest = {
        "image_size": int(samples[0].frame.shape[0]) if samples else 0,
        "has_flow": has_flow,
        "frames": entries,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def _read_png(path: Path, what: str, index: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing {what} {index}")
    with Image.open(path) as im:
        return np.asarray(im)


def load_dataset(directory, with_flow: bool = True) -> list[SceneSample]:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json in {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    has_flow = with_flow and manifest.get("has_flow", False)
    samples = []
    for entry in manifest["frames"]:
        i = int(entry["index"])
        frame = dequantize(_read_png(root / "frames" / f"{i:06d}.png", "frame", i))
        mask_path = root / "masks" / f"{i:06d}.png"
        mask = (_read_png(mask_path, "mask", i) > 127) if mask_path.exists() \
            else np.zeros(frame.shape[:2], dtype=bool)
        flow = None
        if has_flow:
            flow = dequantize(_read_png(root / "flow" / f"{i:06d}.png", "flow", i))
        samples.append(SceneSample(
            frame=frame,
            gt_mask=mask,
            gt_box=BoxGeometry.from_array(entry["box"]),
            homography=np.asarray(entry["homography"], dtype=np.float64).reshape(3, 3),
            sprite_velocity=np.asarray(entry.get("sprite_velocity", [0.0, 0.0]), dtype=np.float64),
            flow_image=flow,
            index=i,
        ))
    return samples


def stack_frames(samples: list[SceneSample]) -> np.ndarray:
    """Frames as a ``(N, H, W, 3)`` uint8 array."""
    return np.stack([quantize(s.frame) for s in samples])


def stack_flows(samples: list[SceneSample]) -> Optional[np.ndarray]:
    if not samples or any(s.flow_image is None for s in samples):
        return None
    return np.stack([quantize(s.flow_image) for s in samples])

