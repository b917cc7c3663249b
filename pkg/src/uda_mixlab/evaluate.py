"""Segmentation metrics: confusion-matrix IoU and boundary-error analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from uda_mixlab.model import SegModel
from uda_mixlab.synthgen import LabeledImage


@dataclass
class EvalReport:
    """Aggregate metrics over an evaluation set.

    per_class_iou maps class id to IoU, or to None for classes absent from
    both prediction and ground truth (undefined, excluded from the mean).
    """

    confusion: np.ndarray  # (C, C) int64, rows = ground truth, cols = prediction
    per_class_iou: dict[int, float | None]
    miou: float
    boundary_error_fraction: float | None = None


@dataclass
class BoundaryErrorStats:
    """Fraction of mispredicted pixels lying near a ground-truth class boundary."""

    fraction: float
    error_count: int
    boundary_error_count: int

    @property
    def no_errors(self) -> bool:
        return self.error_count == 0


def compute_miou(
    predictions: list[np.ndarray],
    ground_truths: list[np.ndarray],
    class_count: int,
    ignore_label: int | None = None,
) -> EvalReport:
    """Accumulate one confusion matrix over the set; IoU = TP / (TP + FP + FN)."""
    if len(predictions) == 0 or len(predictions) != len(ground_truths):
        raise ValueError(
            f"need equally many non-empty predictions and ground truths, got {len(predictions)} and {len(ground_truths)}"
        )
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    for pred, gt in zip(predictions, ground_truths):
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        p = pred.reshape(-1).astype(np.int64)
        g = gt.reshape(-1).astype(np.int64)
        keep = np.ones_like(g, dtype=bool) if ignore_label is None else g != ignore_label
        p, g = p[keep], g[keep]
        if p.size and (p.min() < 0 or p.max() >= class_count or g.min() < 0 or g.max() >= class_count):
            raise ValueError(f"labels outside [0, {class_count}) encountered")
        confusion += np.bincount(g * class_count + p, minlength=class_count * class_count).reshape(
            class_count, class_count
        )
    per_class: dict[int, float | None] = {}
    defined: list[float] = []
    for c in range(class_count):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        denom = tp + fp + fn
        if denom == 0:
            per_class[c] = None
        else:
            iou = float(tp / denom)
            per_class[c] = iou
            defined.append(iou)
    if not defined:
        raise ValueError("IoU is undefined for every class")
    return EvalReport(confusion=confusion, per_class_iou=per_class, miou=float(np.mean(defined)))


def semantic_boundary_mask(gt_labels: np.ndarray, ignore_label: int | None = None) -> np.ndarray:
    """Pixels with a 4-neighbor of a different (non-ignored) class."""
    out = np.zeros(gt_labels.shape, dtype=bool)
    pairs = (
        (np.s_[1:, :], np.s_[:-1, :]),
        (np.s_[:-1, :], np.s_[1:, :]),
        (np.s_[:, 1:], np.s_[:, :-1]),
        (np.s_[:, :-1], np.s_[:, 1:]),
    )
    for here, there in pairs:
        differ = gt_labels[here] != gt_labels[there]
        if ignore_label is not None:
            differ &= (gt_labels[here] != ignore_label) & (gt_labels[there] != ignore_label)
        out[here] |= differ
    return out


def boundary_error_stats(
    pred_labels: np.ndarray,
    gt_labels: np.ndarray,
    radius: int = 2,
    ignore_label: int | None = None,
) -> BoundaryErrorStats:
    """Share of errors within Chebyshev distance `radius` of a class boundary."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    errors = pred_labels != gt_labels
    if ignore_label is not None:
        errors &= gt_labels != ignore_label
    n_err = int(errors.sum())
    if n_err == 0:
        return BoundaryErrorStats(fraction=0.0, error_count=0, boundary_error_count=0)
    band = semantic_boundary_mask(gt_labels, ignore_label)
    if radius > 0:
        band = ndimage.maximum_filter(band.astype(np.uint8), size=2 * radius + 1).astype(bool)
    n_near = int((errors & band).sum())
    return BoundaryErrorStats(fraction=n_near / n_err, error_count=n_err, boundary_error_count=n_near)


def evaluate_model(
    model: SegModel,
    images: list[LabeledImage],
    boundary_radius: int = 2,
    ignore_label: int | None = None,
) -> EvalReport:
    """Forward every scene, aggregate mIoU and the pooled boundary-error fraction."""
    preds = [model.predict_labels(im.pixels) for im in images]
    gts = [im.labels for im in images]
    report = compute_miou(preds, gts, model.arch.class_count, ignore_label=ignore_label)
    err_total = 0
    near_total = 0
    for p, g in zip(preds, gts):
        stats = boundary_error_stats(p, g, radius=boundary_radius, ignore_label=ignore_label)
        err_total += stats.error_count
        near_total += stats.boundary_error_count
    report.boundary_error_fraction = (near_total / err_total) if err_total else None
    return report


def selective_error_rates(
    model: SegModel,
    images: list[LabeledImage],
    tau: float,
    ignore_label: int | None = None,
) -> tuple[float, float, int]:
    """(overall error rate, error rate among confidence > tau pixels, confident count)."""
    wrong_all = kept_all = wrong_conf = kept_conf = 0
    for im in images:
        with torch.no_grad():
            _, probs = model(im.pixels)
        probs_np = probs.numpy()
        pred = probs_np.argmax(axis=0)
        conf = probs_np.max(axis=0)
        keep = np.ones(pred.shape, dtype=bool) if ignore_label is None else im.labels != ignore_label
        err = (pred != im.labels) & keep
        confident = (conf > tau) & keep
        wrong_all += int(err.sum())
        kept_all += int(keep.sum())
        wrong_conf += int((err & confident).sum())
        kept_conf += int(confident.sum())
    overall = wrong_all / kept_all if kept_all else 0.0
    selective = wrong_conf / kept_conf if kept_conf else 0.0
    return overall, selective, kept_conf
