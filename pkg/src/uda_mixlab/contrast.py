"""Multi-level contrastive learning in classifier probability space.

Two photometric views of one mixed image are encoded; confident features are
summarized per class into prototypes (prototype level) and sampled per pixel
(pixel level). Similarity between two feature vectors x, y is the inner
product of their classifier soft assignments sigma(G(x))^T sigma(G(y)), so
alignment happens in probability space rather than raw feature space.

Degenerate situations (fewer than two valid classes, fewer than two sampled
pixels) return a zero loss with a flag instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage

from uda_mixlab.synthgen import STRIDE

PHOTOMETRIC_KEYS = ("brightness", "contrast", "saturation", "blur_sigma")


class LossResult(NamedTuple):
    """Scalar loss tensor plus a flag marking degenerate (empty) inputs."""

    value: torch.Tensor
    degenerate: bool


@dataclass
class PrototypeSet:
    """Per-class mean feature vectors; classes with empty masks are invalid."""

    vectors: dict[int, torch.Tensor]  # class id -> (D,) tensor, only valid classes
    valid: dict[int, bool]


@dataclass
class ViewPair:
    """Two photometric views of one image with their transform descriptors."""

    view1: np.ndarray
    view2: np.ndarray
    descriptor1: dict[str, float]
    descriptor2: dict[str, float]


def is_photometric(descriptor: dict[str, float]) -> bool:
    """True when the transform touches appearance only (no geometry keys)."""
    return set(descriptor) <= set(PHOTOMETRIC_KEYS)


def sample_photometric(rng: np.random.Generator, jitter: float = 0.2, blur_max: float = 1.0) -> dict[str, float]:
    return {
        "brightness": float(rng.uniform(1.0 - jitter, 1.0 + jitter)),
        "contrast": float(rng.uniform(1.0 - jitter, 1.0 + jitter)),
        "saturation": float(rng.uniform(1.0 - jitter, 1.0 + jitter)),
        "blur_sigma": float(rng.uniform(0.0, blur_max)),
    }


def apply_photometric(pixels: np.ndarray, descriptor: dict[str, float]) -> np.ndarray:
    """Deterministic appearance transform; label geometry is untouched."""
    if not is_photometric(descriptor):
        raise ValueError(f"non-photometric descriptor keys: {sorted(set(descriptor) - set(PHOTOMETRIC_KEYS))}")
    out = pixels.astype(np.float64)
    out = out * descriptor.get("brightness", 1.0)
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = gray[..., None] + (out - gray[..., None]) * descriptor.get("saturation", 1.0)
    mean = gray.mean()
    out = mean + (out - mean) * descriptor.get("contrast", 1.0)
    sigma = descriptor.get("blur_sigma", 0.0)
    if sigma > 1e-6:
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_view_pair(pixels: np.ndarray, rng: np.random.Generator) -> ViewPair:
    d1 = sample_photometric(rng)
    d2 = sample_photometric(rng)
    return ViewPair(
        view1=apply_photometric(pixels, d1),
        view2=apply_photometric(pixels, d2),
        descriptor1=d1,
        descriptor2=d2,
    )


def downsample_mask(mask: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Pixel mask -> feature-grid mask by origin-aligned subsampling."""
    if mask.ndim != 2 or mask.shape[0] % stride or mask.shape[1] % stride:
        raise ValueError(f"mask shape {mask.shape} is not divisible by stride {stride}")
    return mask[::stride, ::stride]


def compute_prototypes(features: torch.Tensor, class_masks: dict[int, np.ndarray]) -> PrototypeSet:
    """Masked mean of features per class on the feature grid.

    features: (h, w, D); class_masks: class id -> (h, w) boolean mask.
    A class with an empty mask is marked invalid and gets no vector.
    """
    h, w = int(features.shape[0]), int(features.shape[1])
    vectors: dict[int, torch.Tensor] = {}
    valid: dict[int, bool] = {}
    for c, mask in class_masks.items():
        if mask.shape != (h, w):
            raise ValueError(f"mask for class {c} has shape {mask.shape}, expected {(h, w)}")
        m = torch.from_numpy(np.ascontiguousarray(mask.astype(bool)))
        n = int(m.sum())
        valid[c] = n > 0
        if n > 0:
            vectors[c] = features[m].mean(dim=0)
    return PrototypeSet(vectors=vectors, valid=valid)


def _class_probs(classifier_weights: tuple[torch.Tensor, torch.Tensor], vecs: torch.Tensor) -> torch.Tensor:
    """Soft class assignments sigma(G(v)) for rows of a (n, D) matrix."""
    weight, bias = classifier_weights
    return torch.softmax(vecs @ weight.T + bias, dim=-1)


def prob_similarity(
    classifier_weights: tuple[torch.Tensor, torch.Tensor],
    v_a: torch.Tensor,
    v_b: torch.Tensor,
) -> torch.Tensor:
    """H(a, b) = sigma(G(a))^T sigma(G(b)), a scalar in (0, 1]."""
    pa = _class_probs(classifier_weights, v_a.unsqueeze(0))[0]
    pb = _class_probs(classifier_weights, v_b.unsqueeze(0))[0]
    return (pa * pb).sum()


def _info_nce(sim_same: torch.Tensor, sim_cross: torch.Tensor, scale: float) -> torch.Tensor:
    """Sum over anchors of -log softmax-style ratios.

    sim_same: (n, n) similarities within the anchor view (self term dropped).
    sim_cross: (n, n) similarities to the other view (diagonal = positives,
    which stay in the denominator).
    """
    e_same = torch.exp(scale * sim_same)
    e_cross = torch.exp(scale * sim_cross)
    numer = torch.diagonal(e_cross)
    # Zero the self term before summing: subtracting it after the row sum
    # cancels catastrophically when it dominates the true negatives.
    eye = torch.eye(e_same.shape[0], dtype=torch.bool, device=e_same.device)
    denom = e_same.masked_fill(eye, 0.0).sum(dim=1) + e_cross.sum(dim=1)
    return -torch.log(numer / denom).sum()


def detached_prototypes(ps: PrototypeSet) -> PrototypeSet:
    return PrototypeSet(vectors={c: v.detach() for c, v in ps.vectors.items()}, valid=dict(ps.valid))


def proto_contrastive_loss(
    ps1: PrototypeSet,
    ps2: PrototypeSet,
    classifier_weights: tuple[torch.Tensor, torch.Tensor],
    s1: float = 7.0,
    targets1: PrototypeSet | None = None,
    targets2: PrototypeSet | None = None,
) -> LossResult:
    """Symmetrized prototype-level loss over classes valid in both views.

    For anchors of one view the other view's prototypes act as fixed targets:
    by default gradient-blocked copies of ps1/ps2; explicit target sets can be
    supplied instead (finite-difference checks freeze them at the base point).
    """
    if s1 <= 0:
        raise ValueError(f"scale s1 must be > 0, got {s1}")
    t1 = detached_prototypes(ps1) if targets1 is None else targets1
    t2 = detached_prototypes(ps2) if targets2 is None else targets2
    classes = sorted(
        c
        for c in ps1.valid
        if ps1.valid.get(c) and ps2.valid.get(c) and t1.valid.get(c) and t2.valid.get(c)
    )
    weight, _ = classifier_weights
    if len(classes) < 2:
        return LossResult(torch.zeros((), dtype=weight.dtype), True)
    p1 = _class_probs(classifier_weights, torch.stack([ps1.vectors[c] for c in classes]))
    p2 = _class_probs(classifier_weights, torch.stack([ps2.vectors[c] for c in classes]))
    q1 = _class_probs(classifier_weights, torch.stack([t1.vectors[c] for c in classes]))
    q2 = _class_probs(classifier_weights, torch.stack([t2.vectors[c] for c in classes]))
    loss = _info_nce(p1 @ p1.T, p1 @ q2.T, s1) + _info_nce(p2 @ p2.T, p2 @ q1.T, s1)
    return LossResult(loss, False)


def pixel_contrastive_loss(
    f1: torch.Tensor,
    f2: torch.Tensor,
    classifier_weights: tuple[torch.Tensor, torch.Tensor],
    s2: float = 20.0,
    pixel_sample: np.ndarray | None = None,
) -> LossResult:
    """Symmetrized pixel-level loss at sampled feature-grid positions.

    f1, f2: (h, w, D) features of the two views; pixel_sample: (n, 2) array of
    (row, col) positions shared by both views. The positive for an anchor is
    the same position in the other view; no gradients are blocked.
    """
    if s2 <= 0:
        raise ValueError(f"scale s2 must be > 0, got {s2}")
    if f1.shape != f2.shape:
        raise ValueError(f"view feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    weight, _ = classifier_weights
    if pixel_sample is None or len(pixel_sample) < 2:
        return LossResult(torch.zeros((), dtype=weight.dtype), True)
    idx = np.asarray(pixel_sample)
    if idx.ndim != 2 or idx.shape[1] != 2:
        raise ValueError(f"pixel_sample must be (n, 2), got shape {idx.shape}")
    h, w = int(f1.shape[0]), int(f1.shape[1])
    if idx.min() < 0 or idx[:, 0].max() >= h or idx[:, 1].max() >= w:
        raise ValueError("pixel_sample positions fall outside the feature grid")
    rows = torch.from_numpy(np.ascontiguousarray(idx[:, 0])).long()
    cols = torch.from_numpy(np.ascontiguousarray(idx[:, 1])).long()
    p1 = _class_probs(classifier_weights, f1[rows, cols])
    p2 = _class_probs(classifier_weights, f2[rows, cols])
    loss = _info_nce(p1 @ p1.T, p1 @ p2.T, s2) + _info_nce(p2 @ p2.T, p2 @ p1.T, s2)
    return LossResult(loss, False)
