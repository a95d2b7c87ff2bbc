"""Segmentation and superpixel quality metrics.

Boundary sets are pixels with at least one differing 4-neighbour (6-neighbour
in 3D).  Distances are Euclidean in pixel units.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import binary_dilation, find_objects
from scipy.spatial import cKDTree

from .slic import boundary_mask


class MetricError(ValueError):
    pass


def _congruent(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int = 1) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, gt = _congruent(pred, gt)
    a, b = pred == class_id, gt == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """``conf[t, p]`` counts pixels of true class t predicted as p."""
    pred, gt = _congruent(pred, gt)
    idx = gt.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both maps."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def mean_iu_from_confusion(conf: np.ndarray) -> float:
    ious = iou_from_confusion(conf)
    return float(np.nanmean(ious)) if np.any(~np.isnan(ious)) else float("nan")


def iou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes))


def mean_iu(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean, skipping classes with an empty union."""
    conf = confusion_matrix(pred, gt, num_classes)
    return iou_from_confusion(conf), mean_iu_from_confusion(conf)


def boundary_set(label: np.ndarray, class_id: int | None = None) -> np.ndarray:
    """Coordinates ``(K, ndim)`` of boundary pixels of a label map (or of one class mask)."""
    lab = np.asarray(label)
    if class_id is not None:
        lab = lab == class_id
    return np.argwhere(boundary_mask(lab))


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        raise MetricError("boundary distance undefined for an empty boundary set")
    d, _ = cKDTree(b).query(a)
    return d


def hausdorff_symmetric(a: np.ndarray, b: np.ndarray) -> float:
    return float(max(_directed(a, b).max(), _directed(b, a).max()))


def adb(a: np.ndarray, b: np.ndarray) -> float:
    """Average distance of boundaries: mean of the two directed mean distances."""
    return float(0.5 * (_directed(a, b).mean() + _directed(b, a).mean()))


def combined_score_s(per_class: dict) -> float:
    """S = sum over classes of (Dice/2 - ADB/4 - Hausdorff/30).

    ``per_class`` maps class name to ``{"dice", "adb", "hausdorff"}`` (or a
    3-tuple in that order).
    """
    if not per_class:
        raise MetricError("no classes given")
    total = 0.0
    for name, m in per_class.items():
        if isinstance(m, dict):
            missing = {"dice", "adb", "hausdorff"} - set(m)
            if missing:
                raise MetricError(f"class {name!r} lacks {sorted(missing)}")
            d, a, h = m["dice"], m["adb"], m["hausdorff"]
        else:
            d, a, h = m
        total += d / 2.0 - a / 4.0 - h / 30.0
    return total


def boundary_recall(cells: np.ndarray, gt: np.ndarray, tol_pixels: int = 2) -> float:
    """Fraction of ground-truth boundary pixels within ``tol`` (Chebyshev) of a cell boundary."""
    cells, gt = _congruent(cells, gt)
    gt_b = boundary_mask(gt)
    if not gt_b.any():
        raise MetricError("ground truth has no boundary pixels")
    sp_b = boundary_mask(cells)
    if tol_pixels > 0:
        sp_b = binary_dilation(sp_b, structure=np.ones((3,) * cells.ndim, dtype=bool), iterations=tol_pixels)
    return float((gt_b & sp_b).sum() / gt_b.sum())


def _exposed_faces(mask: np.ndarray) -> int:
    padded = np.pad(mask, 1)
    faces = 0
    for ax in range(mask.ndim):
        faces += int(np.count_nonzero(np.diff(padded.astype(np.int8), axis=ax)))
    return faces


def compactness(cells: np.ndarray) -> float:
    """Area-weighted isoperimetric quotient of the cells, clamped to 1.

    2D: 4*pi*A / P^2 with P the count of exposed pixel edges; 3D uses
    36*pi*V^2 / A^3 with A the count of exposed voxel faces.
    """
    cells = np.asarray(cells)
    _, inv = np.unique(cells, return_inverse=True)
    inv = inv.reshape(cells.shape) + 1
    sizes = np.bincount(inv.reshape(-1))
    total = 0.0
    for k, box in enumerate(find_objects(inv), start=1):
        if box is None:
            continue
        size = int(sizes[k])
        faces = _exposed_faces(inv[box] == k)
        if cells.ndim == 2:
            q = 4 * math.pi * size / faces**2
        else:
            q = 36 * math.pi * size**2 / faces**3
        total += size * min(q, 1.0)
    return float(total / cells.size)
