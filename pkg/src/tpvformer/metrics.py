"""IoU metrics for point segmentation and semantic scene completion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def confusion_matrix(pred, truth, n_classes: int, ignore=()) -> np.ndarray:
    """[n_classes, n_classes] counts indexed (prediction, truth).

    Entries whose true label is in ``ignore`` are skipped.
    """
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    t = np.asarray(truth).reshape(-1).astype(np.int64)
    if p.shape != t.shape:
        raise ShapeError(f"prediction has {p.size} entries, truth has {t.size}")
    keep = ~np.isin(t, list(ignore)) if ignore else np.ones(t.shape, dtype=bool)
    p, t = p[keep], t[keep]
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise ShapeError(f"labels outside [0, {n_classes})")
    return np.bincount(p * n_classes + t, minlength=n_classes ** 2).reshape(n_classes, n_classes)


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN where the class has an empty union or is excluded
    mean: float


def iou_from_confusion(cm: np.ndarray, exclude=()) -> IoUResult:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=1) - tp
    fn = cm.sum(axis=0) - tp
    union = tp + fp + fn
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    for k in exclude:
        iou[k] = np.nan
    valid = ~np.isnan(iou)
    return IoUResult(iou, float(iou[valid].mean()) if valid.any() else float("nan"))


def miou(pred, truth, n_classes: int | None = None, ignore=()) -> IoUResult:
    """Per-class IoU and their mean over classes present in pred or truth."""
    p = np.asarray(pred).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"prediction has {p.size} entries, truth has {t.size}")
    if n_classes is None:
        n_classes = int(max(p.max(initial=0), t.max(initial=0))) + 1
    return iou_from_confusion(confusion_matrix(p, t, n_classes, ignore))


def sc_iou(pred_grid, true_grid, empty_class: int) -> float:
    """IoU of occupied voxels, ignoring semantics."""
    p = np.asarray(pred_grid)
    t = np.asarray(true_grid)
    if p.shape != t.shape:
        raise ShapeError(f"grid shapes differ: {p.shape} vs {t.shape}")
    po, to = p != empty_class, t != empty_class
    union = np.logical_or(po, to).sum()
    return float(np.logical_and(po, to).sum() / union) if union else float("nan")


def ssc_miou(pred_grid, true_grid, empty_class: int) -> IoUResult:
    """mIoU over all voxels with the empty class left out of the mean."""
    p = np.asarray(pred_grid)
    t = np.asarray(true_grid)
    if p.shape != t.shape:
        raise ShapeError(f"grid shapes differ: {p.shape} vs {t.shape}")
    n = int(max(p.max(initial=0), t.max(initial=0), empty_class)) + 1
    return iou_from_confusion(confusion_matrix(p, t, n), exclude=(empty_class,))
