"""Teacher pseudo-labels and confidence thresholding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class PseudoLabel:
    """Hard argmax labels with their winning probability per pixel."""

    labels: np.ndarray      # (H, W) int32
    confidence: np.ndarray  # (H, W) float32, = max class probability
    class_count: int


def pseudo_label(pred: np.ndarray | torch.Tensor) -> PseudoLabel:
    """Hard labels from a normalized (C, H, W) prediction; ties pick the lowest id."""
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    if pred.ndim != 3:
        raise ValueError(f"prediction must be (C, H, W), got shape {pred.shape}")
    sums = pred.sum(axis=0)
    if pred.min() < -1e-6 or not np.allclose(sums, 1.0, atol=1e-4):
        raise ValueError("prediction must be per-pixel normalized probabilities")
    labels = pred.argmax(axis=0).astype(np.int32)
    confidence = pred.max(axis=0).astype(np.float32)
    return PseudoLabel(labels=labels, confidence=confidence, class_count=int(pred.shape[0]))


def confidence_mask(pl: PseudoLabel, tau: float) -> np.ndarray:
    """Boolean mask of pixels with confidence strictly above tau."""
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    return pl.confidence > tau


def class_confidence_mask(pl: PseudoLabel, c: int, tau: float) -> np.ndarray:
    """Mask of pixels pseudo-labeled c with confidence strictly above tau."""
    if not (0.0 <= tau < 1.0):
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if not (0 <= c < pl.class_count):
        raise ValueError(f"class id {c} outside [0, {pl.class_count})")
    return (pl.labels == c) & (pl.confidence > tau)
