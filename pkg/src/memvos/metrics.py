"""Segmentation quality measures on boolean masks.

Two standard scores: region similarity (intersection over union) and
boundary similarity (an F measure over contour pixels with a spatial
tolerance). Both are pure numpy/scipy, independent of the model.
"""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

DEFAULT_BOUNDARY_TOLERANCE_FRACTION = 0.008


def region_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(pred, gt).sum()
    return float(inter) / float(union)


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return yy * yy + xx * xx <= radius * radius


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask that touch background (frame border counts)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = binary_erosion(mask, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return mask & ~eroded


def boundary_similarity(pred: np.ndarray, gt: np.ndarray,
                        tolerance_px: int | None = None) -> float:
    """Harmonic mean of boundary precision and recall.

    A predicted contour pixel is correct when a true contour pixel lies
    within ``tolerance_px`` (disk neighborhood). When the tolerance is
    not given it defaults to 0.8% of the frame diagonal. Two empty
    masks score 1; exactly one empty mask scores 0.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() and not gt.any():
        return 1.0
    if not pred.any() or not gt.any():
        return 0.0
    if tolerance_px is None:
        h, w = pred.shape
        tolerance_px = int(round(DEFAULT_BOUNDARY_TOLERANCE_FRACTION * np.hypot(h, w)))
    bp = mask_boundary(pred)
    bg = mask_boundary(gt)
    disk = _disk(int(tolerance_px))
    bp_hit = bp & binary_dilation(bg, structure=disk)
    bg_hit = bg & binary_dilation(bp, structure=disk)
    precision = bp_hit.sum() / bp.sum()
    recall = bg_hit.sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


def evaluate_masks(pred: np.ndarray, gt: np.ndarray, num_objects: int,
                   tolerance_px: int | None = 2, skip_first: bool = True) -> Dict[str, float]:
    """Average region/boundary scores over frames and object ids.

    ``pred`` and ``gt`` are integer id maps [T, H, W]. Frame 0 carries
    the given reference mask, so it is skipped by default.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask stacks differ: {pred.shape} vs {gt.shape}")
    t0 = 1 if skip_first else 0
    js, fs = [], []
    for t in range(t0, pred.shape[0]):
        for k in range(1, num_objects + 1):
            js.append(region_similarity(pred[t] == k, gt[t] == k))
            fs.append(boundary_similarity(pred[t] == k, gt[t] == k, tolerance_px))
    return {
        "region": float(np.mean(js)) if js else 1.0,
        "boundary": float(np.mean(fs)) if fs else 1.0,
    }


def summarize(per_clip: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Mean scores over clips plus their combined average."""
    region = float(np.mean([m["region"] for m in per_clip]))
    boundary = float(np.mean([m["boundary"] for m in per_clip]))
    return {"region": region, "boundary": boundary,
            "combined": 0.5 * (region + boundary)}
