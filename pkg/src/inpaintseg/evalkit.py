"""Segmentation and detection metrics.

* region similarity ``J`` (mask IoU),
* boundary measure ``F`` (contour precision/recall within a pixel band),
* threshold grid search over soft masks,
* single-class AP at IoU 0.5,
* a threshold + largest-component mask refinement.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxes import box_iou

THRESHOLDS = np.arange(1, 21) / 20.0


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def j_measure(pred_mask, gt_mask) -> float:
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    _check_shapes(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbor outside the mask (the frame border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def default_band_radius(shape) -> int:
    return int(math.ceil(0.0075 * math.hypot(*shape[:2])))


def f_measure(pred_mask, gt_mask, band_radius=None) -> float:
    """Harmonic mean of boundary precision and recall.

    A boundary pixel matches when an opposite-set boundary pixel lies within
    ``band_radius`` (Euclidean).  Two empty masks score 1; a boundary on only
    one side scores 0.
    """
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    _check_shapes(pred, gt)
    if band_radius is None:
        band_radius = default_band_radius(pred.shape)
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = float((dist_to_gt[bp] <= band_radius).mean())
    recall = float((dist_to_pred[bg] <= band_radius).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def threshold_search(soft_masks, gt_masks):
    """Best mean-J binarization threshold on the 0.05 grid; ties go to the lower threshold.

    Threshold 0 would mark every pixel as foreground and is not searched.
    Returns ``(best_threshold, mean_j_at_best)``.
    """
    if len(soft_masks) == 0 or len(soft_masks) != len(gt_masks):
        raise ValueError("need equally long, nonempty lists of soft and ground-truth masks")
    scores = np.zeros(len(THRESHOLDS))
    for soft, gt in zip(soft_masks, gt_masks):
        soft = np.asarray(soft, dtype=np.float64)
        for k, t in enumerate(THRESHOLDS):
            scores[k] += j_measure(soft >= t, gt)
    scores /= len(soft_masks)
    best = int(np.argmax(scores))
    return float(THRESHOLDS[best]), float(scores[best])


def average_precision(confidences, hits, num_gt: int) -> float:
    """All-point interpolated AP from per-prediction hit flags."""
    if num_gt == 0:
        return 0.0
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(hits, dtype=bool)
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(hits[order])
    fp = np.cumsum(~hits[order])
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall steps counted in true positives and normalized once, so a
    # perfect ranking scores exactly 1
    steps = np.diff(np.concatenate([[0], tp]))
    return float(np.sum(steps * envelope) / num_gt)


def map50(predictions, gt_boxes) -> float:
    """Single-class AP at IoU >= 0.5.

    Args:
        predictions: per frame, a list of ``(box, confidence)`` pairs.
        gt_boxes: one ground-truth box per frame.
    """
    confs, hits = [], []
    for preds, gt in zip(predictions, gt_boxes):
        matched = False
        for box, conf in sorted(preds, key=lambda bc: -bc[1]):
            hit = (not matched) and box_iou(box, gt) >= 0.5
            matched = matched or hit
            confs.append(conf)
            hits.append(hit)
    return average_precision(confs, hits, len(gt_boxes))


def refine_mask(soft_mask, threshold: float) -> np.ndarray:
    """Binarize, keep the largest 4-connected component and fill its holes."""
    binary = np.asarray(soft_mask, dtype=np.float64) >= threshold
    labels, n = ndimage.label(binary)
    if n == 0:
        return np.zeros_like(binary)
    sizes = ndimage.sum(binary, labels, index=np.arange(1, n + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


@dataclass
class EvalReport:
    j_measure: float
    f_measure: float
    map50: float
    best_threshold: float
    per_frame: list = field(default_factory=list)   # (index, j, f, iou_box)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "j", "f", "iou_box"])
            for row in self.per_frame:
                writer.writerow([int(row[0])] + [f"{float(v):.6f}" for v in row[1:]])


def evaluate_predictions(soft_masks, gt_masks, pred_boxes, confidences, gt_boxes,
                         indices=None, refine: bool = True, band_radius=None) -> EvalReport:
    """Full protocol: threshold search on the soft masks, then per-frame J/F and AP."""
    best_t, _ = threshold_search(soft_masks, gt_masks)
    indices = list(range(len(gt_masks))) if indices is None else list(indices)
    rows, js, fs = [], [], []
    for i, soft, gt, box, gbox in zip(indices, soft_masks, gt_masks, pred_boxes, gt_boxes):
        binary = refine_mask(soft, best_t) if refine else np.asarray(soft) >= best_t
        j, f = j_measure(binary, gt), f_measure(binary, gt, band_radius)
        js.append(j)
        fs.append(f)
        rows.append((int(i), j, f, box_iou(box, gbox)))
    ap = map50([[(b, c)] for b, c in zip(pred_boxes, confidences)], gt_boxes)
    return EvalReport(j_measure=float(np.mean(js)), f_measure=float(np.mean(fs)), map50=ap,
                      best_threshold=best_t, per_frame=rows)
