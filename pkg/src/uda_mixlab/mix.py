"""Cross-domain sample mixing: class mixing and high-confidence target mixing.

Both directions share one composition primitive: mask value 1 takes the paste
image, 0 keeps the base. Class mixing pastes about half of the source classes
onto a target scene; high-confidence target mixing pastes confident target
pixels onto a source scene, so every pixel of the result carries either a
ground-truth or a high-confidence pseudo label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from uda_mixlab.synthgen import LabeledImage


@dataclass
class MixedSample:
    """Composite image, composite labels, and pixel provenance (1 = paste)."""

    pixels: np.ndarray      # (H, W, 3) float32
    labels: np.ndarray      # (H, W) int32
    paste_mask: np.ndarray  # (H, W) bool


def sample_classmix_mask(
    source_labels: np.ndarray,
    rng: np.random.Generator,
    ignore_label: int | None = None,
) -> np.ndarray:
    """Mask covering ceil(K/2) of the K classes present in the source label map.

    Ignore-labeled pixels never drive class selection (and are never selected),
    but remain valid paste pixels when a chosen class covers them elsewhere.
    """
    if source_labels.ndim != 2:
        raise ValueError(f"source_labels must be 2-D, got shape {source_labels.shape}")
    present = np.unique(source_labels)
    if ignore_label is not None:
        present = present[present != ignore_label]
    if present.size == 0:
        raise ValueError("source label map has no selectable classes")
    k = math.ceil(present.size / 2)
    chosen = rng.choice(present, size=k, replace=False)
    return np.isin(source_labels, chosen)


def compose_mixed_sample(base: LabeledImage, paste: LabeledImage, mask: np.ndarray) -> MixedSample:
    """x = paste * mask + base * (1 - mask), same for labels."""
    if base.pixels.shape != paste.pixels.shape or base.labels.shape != paste.labels.shape:
        raise ValueError(
            f"base and paste shapes differ: {base.pixels.shape} vs {paste.pixels.shape}"
        )
    if mask.shape != base.labels.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {base.labels.shape}")
    m = mask.astype(bool)
    pixels = np.where(m[..., None], paste.pixels, base.pixels)
    labels = np.where(m, paste.labels, base.labels)
    return MixedSample(pixels=pixels.astype(np.float32), labels=labels.astype(np.int32), paste_mask=m.copy())


def new_boundary_mask(sample: MixedSample) -> np.ndarray:
    """Pixels with a 4-neighbor of different label AND different provenance.

    These are label boundaries created by the composition itself rather than
    boundaries inherited from either ingredient.
    """
    lab = sample.labels
    pm = sample.paste_mask
    out = np.zeros_like(pm, dtype=bool)
    pairs = (
        (np.s_[1:, :], np.s_[:-1, :]),
        (np.s_[:-1, :], np.s_[1:, :]),
        (np.s_[:, 1:], np.s_[:, :-1]),
        (np.s_[:, :-1], np.s_[:, 1:]),
    )
    for here, there in pairs:
        out[here] |= (lab[here] != lab[there]) & (pm[here] != pm[there])
    return out


def _colorize_labels(labels: np.ndarray) -> np.ndarray:
    """Fixed qualitative colormap for label panels in debug dumps."""
    table = np.array(
        [
            (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
            (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
            (188, 189, 34), (23, 190, 207),
        ],
        dtype=np.uint8,
    )
    return table[labels % len(table)]


def save_triptych(base: LabeledImage, paste: LabeledImage, sample: MixedSample, path: str) -> None:
    """Side-by-side PNG (base / paste / mixed), pixels on top, labels below."""
    gap = 2
    panels_top = [base.pixels, paste.pixels, sample.pixels]
    panels_bot = [_colorize_labels(a) for a in (base.labels, paste.labels, sample.labels)]
    h, w = base.labels.shape
    canvas = np.full((2 * h + gap, 3 * w + 2 * gap, 3), 255, dtype=np.uint8)
    for i, (top, bot) in enumerate(zip(panels_top, panels_bot)):
        x0 = i * (w + gap)
        canvas[:h, x0 : x0 + w] = np.round(np.asarray(top) * 255.0).astype(np.uint8)
        canvas[h + gap :, x0 : x0 + w] = bot
    Image.fromarray(canvas, mode="RGB").save(path)
