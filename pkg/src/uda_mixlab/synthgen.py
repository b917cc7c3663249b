"""Procedural generation of paired-domain toy segmentation benchmarks.

A scene is a stack of overlapping shapes (axis-aligned rectangles, rotated
ellipses, thin rotated bars) painted onto a background class. Scene layout is
a pure function of the scene seed and the canvas geometry; appearance (base
colors, global color shift, multiplicative texture, additive noise) comes
from a DomainSpec, so the same scene seed rendered under two specs yields a
pixel-level domain shift with identical label geometry statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

STRIDE = 8
_U64 = 0xFFFFFFFFFFFFFFFF

DEFAULT_CLASS_COUNT = 5

# Base colors keep headroom so moderate shift/texture/noise rarely clips.
DEFAULT_PALETTE = (
    (0.26, 0.30, 0.36),
    (0.58, 0.26, 0.24),
    (0.24, 0.56, 0.30),
    (0.62, 0.58, 0.26),
    (0.34, 0.34, 0.64),
    (0.56, 0.42, 0.58),
    (0.22, 0.52, 0.56),
    (0.66, 0.44, 0.30),
)


def ignore_id(class_count: int) -> int:
    """Reserved ignore label: one past the last semantic class id."""
    return class_count


def _rng(*keys: int) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of (possibly negative) ints."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & _U64 for k in keys]))


@dataclass(frozen=True)
class DomainSpec:
    """Appearance parameters of one domain.

    palette: per-class base RGB colors in [0, 1], indexed by class id.
    color_shift: additive per-channel shift, each component in [-0.5, 0.5].
    noise_std: std of additive Gaussian pixel noise, >= 0.
    texture_freq: spatial frequency of the multiplicative sinusoid, > 0.
    texture_amp: amplitude of the texture field, >= 0 (0 disables texture).
    seed: domain appearance seed, mixed with the scene seed for noise draws.
    """

    palette: tuple[tuple[float, float, float], ...]
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0
    texture_freq: float = 3.0
    texture_amp: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.palette) == 0:
            raise ValueError("palette must contain at least one color")
        for color in self.palette:
            if len(color) != 3 or any(not (0.0 <= v <= 1.0) for v in color):
                raise ValueError(f"palette colors must be RGB triples in [0, 1], got {color!r}")
        if len(self.color_shift) != 3 or any(not (-0.5 <= v <= 0.5) for v in self.color_shift):
            raise ValueError(f"color_shift components must lie in [-0.5, 0.5], got {self.color_shift!r}")
        if self.noise_std < 0.0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.texture_freq <= 0.0:
            raise ValueError(f"texture_freq must be > 0, got {self.texture_freq}")
        if self.texture_amp < 0.0:
            raise ValueError(f"texture_amp must be >= 0, got {self.texture_amp}")


@dataclass
class LabeledImage:
    """One scene: float32 RGB pixels in [0, 1] and an int32 label map."""

    pixels: np.ndarray  # (H, W, 3) float32
    labels: np.ndarray  # (H, W) int32

    def validate(self, class_count: int | None = None, allow_ignore: bool = False) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.labels.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"label shape {self.labels.shape} does not match pixel shape {self.pixels.shape[:2]}"
            )
        h, w = self.labels.shape
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"height and width must be multiples of {STRIDE}, got {h}x{w}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels contain non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        if class_count is not None:
            top = class_count + 1 if allow_ignore else class_count
            if self.labels.min() < 0 or self.labels.max() >= top:
                raise ValueError(f"labels must lie in [0, {top - 1}]")


@dataclass
class DatasetPair:
    """Source scenes with labels, unlabeled-by-convention target scenes, and a held-out eval split.

    Target labels are retained for evaluation only and must never reach the
    training losses.
    """

    source: list[LabeledImage]
    target: list[LabeledImage]
    target_eval: list[LabeledImage]
    class_count: int
    source_seeds: list[int] = field(default_factory=list)
    target_seeds: list[int] = field(default_factory=list)
    eval_seeds: list[int] = field(default_factory=list)


def _paint_shape(labels: np.ndarray, rng: np.random.Generator, class_id: int, kind: str) -> None:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0, h)
    cx = rng.uniform(0, w)
    if kind == "rect":
        half_h = rng.uniform(h / 8, h / 2.5) / 2
        half_w = rng.uniform(w / 8, w / 2.5) / 2
        inside = (np.abs(yy - cy) <= half_h) & (np.abs(xx - cx) <= half_w)
    elif kind == "ellipse":
        a = rng.uniform(h / 10, h / 4)
        b = rng.uniform(w / 10, w / 4)
        theta = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        inside = (u / b) ** 2 + (v / a) ** 2 <= 1.0
    elif kind == "bar":
        # Thin bars (1..3 px at 64 px scale) give boundary-dominated classes.
        thickness = int(rng.integers(1, 4)) * min(h, w) / 64.0
        length = rng.uniform(0.5, 1.1) * min(h, w)
        theta = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        inside = (np.abs(u) <= length / 2) & (np.abs(v) <= thickness / 2)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    labels[inside] = class_id


def generate_scene(
    seed: int,
    spec: DomainSpec,
    height: int = 96,
    width: int = 96,
    class_count: int = DEFAULT_CLASS_COUNT,
) -> LabeledImage:
    """Render one labeled scene. Bit-identical for identical arguments."""
    if height <= 0 or width <= 0 or height % STRIDE or width % STRIDE:
        raise ValueError(f"height and width must be positive multiples of {STRIDE}, got {height}x{width}")
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    if len(spec.palette) < class_count:
        raise ValueError(f"palette has {len(spec.palette)} colors but class_count is {class_count}")

    layout_rng = _rng(seed, 0xA11)
    labels = np.full((height, width), layout_rng.integers(class_count), dtype=np.int32)
    n_shapes = int(layout_rng.integers(7, 13))
    kinds = ["rect", "ellipse", "bar"]
    for k in range(n_shapes):
        # Force two thin bars per scene so boundary-dense classes always exist.
        kind = "bar" if k >= n_shapes - 2 else kinds[int(layout_rng.integers(3))]
        _paint_shape(labels, layout_rng, int(layout_rng.integers(class_count)), kind)
    while len(np.unique(labels)) < 2:
        other = (labels[0, 0] + 1 + int(layout_rng.integers(class_count - 1))) % class_count
        _paint_shape(labels, layout_rng, int(other), "rect")

    appearance_rng = _rng(seed, spec.seed, 0xC0105)
    palette = np.asarray(spec.palette, dtype=np.float64)[:class_count]
    img = palette[labels]
    img = img + np.asarray(spec.color_shift, dtype=np.float64)
    if spec.texture_amp > 0.0:
        direction = appearance_rng.uniform(0, 2 * math.pi)
        phase = appearance_rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        wave = np.sin(
            2 * math.pi * spec.texture_freq * ((xx / width) * math.cos(direction) + (yy / height) * math.sin(direction))
            + phase
        )
        img = img * (1.0 + spec.texture_amp * wave)[..., None]
    if spec.noise_std > 0.0:
        img = img + appearance_rng.normal(0.0, spec.noise_std, size=img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pixels, labels=labels)


def make_benchmark(
    seed: int,
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    n_source: int,
    n_target: int,
    n_eval: int = 20,
    height: int = 96,
    width: int = 96,
    class_count: int = DEFAULT_CLASS_COUNT,
) -> DatasetPair:
    """Build a paired benchmark with disjoint scene seeds per split."""
    if n_source < 1 or n_target < 1:
        raise ValueError(f"n_source and n_target must be >= 1, got {n_source}, {n_target}")
    if n_eval < 0:
        raise ValueError(f"n_eval must be >= 0, got {n_eval}")
    base = (int(seed) & _U64) * 1_000_003
    source_seeds = [base + i for i in range(n_source)]
    target_seeds = [base + n_source + i for i in range(n_target)]
    eval_seeds = [base + n_source + n_target + i for i in range(n_eval)]
    return DatasetPair(
        source=[generate_scene(s, source_spec, height, width, class_count) for s in source_seeds],
        target=[generate_scene(s, target_spec, height, width, class_count) for s in target_seeds],
        target_eval=[generate_scene(s, target_spec, height, width, class_count) for s in eval_seeds],
        class_count=class_count,
        source_seeds=source_seeds,
        target_seeds=target_seeds,
        eval_seeds=eval_seeds,
    )


def default_source_spec(class_count: int = DEFAULT_CLASS_COUNT, seed: int = 11) -> DomainSpec:
    return DomainSpec(
        palette=DEFAULT_PALETTE[:class_count],
        color_shift=(0.0, 0.0, 0.0),
        noise_std=0.04,
        texture_freq=3.0,
        texture_amp=0.12,
        seed=seed,
    )


def default_target_spec(class_count: int = DEFAULT_CLASS_COUNT, seed: int = 12) -> DomainSpec:
    return DomainSpec(
        palette=DEFAULT_PALETTE[:class_count],
        color_shift=(0.13, 0.12, 0.15),
        noise_std=0.08,
        texture_freq=6.0,
        texture_amp=0.25,
        seed=seed,
    )


def domain_gap(pair: DatasetPair) -> float:
    """Mean absolute distance between per-channel pixel mean/std of source vs target."""
    src = np.stack([im.pixels for im in pair.source])
    tgt = np.stack([im.pixels for im in pair.target])
    mu_s, mu_t = src.mean(axis=(0, 1, 2)), tgt.mean(axis=(0, 1, 2))
    sd_s, sd_t = src.std(axis=(0, 1, 2)), tgt.std(axis=(0, 1, 2))
    return float(np.abs(mu_s - mu_t).mean() + np.abs(sd_s - sd_t).mean())


# --- serialization -----------------------------------------------------------


def domain_spec_to_items(spec: DomainSpec) -> dict[str, str]:
    """Flat key=value form; float repr keeps round trips exact."""
    items: dict[str, str] = {}
    for i, color in enumerate(spec.palette):
        items[f"palette_{i}"] = ",".join(repr(float(v)) for v in color)
    items["color_shift"] = ",".join(repr(float(v)) for v in spec.color_shift)
    items["noise_std"] = repr(float(spec.noise_std))
    items["texture_freq"] = repr(float(spec.texture_freq))
    items["texture_amp"] = repr(float(spec.texture_amp))
    items["seed"] = str(int(spec.seed))
    return items


def domain_spec_from_items(items: dict[str, str]) -> DomainSpec:
    palette_keys = sorted(
        (k for k in items if k.startswith("palette_")), key=lambda k: int(k.split("_")[1])
    )
    if not palette_keys:
        raise ValueError("domain spec is missing palette_<i> entries")
    expected = [f"palette_{i}" for i in range(len(palette_keys))]
    if palette_keys != expected:
        raise ValueError(f"palette indices must be contiguous from 0, got {palette_keys}")
    palette = tuple(tuple(float(v) for v in items[k].split(",")) for k in palette_keys)
    shift = tuple(float(v) for v in items["color_shift"].split(","))
    return DomainSpec(
        palette=palette,  # type: ignore[arg-type]
        color_shift=shift,  # type: ignore[arg-type]
        noise_std=float(items["noise_std"]),
        texture_freq=float(items["texture_freq"]),
        texture_amp=float(items["texture_amp"]),
        seed=int(items["seed"]),
    )


def write_scene_png(image: LabeledImage, pixels_path: str, labels_path: str) -> None:
    """Dump pixels as 8-bit RGB PNG and labels as 8-bit grayscale PNG."""
    rgb = np.round(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(pixels_path)
    if image.labels.max() > 255:
        raise ValueError("label ids above 255 cannot be stored as 8-bit PNG")
    Image.fromarray(image.labels.astype(np.uint8), mode="L").save(labels_path)


def read_scene_png(pixels_path: str, labels_path: str) -> LabeledImage:
    rgb = np.asarray(Image.open(pixels_path).convert("RGB"), dtype=np.float32) / 255.0
    labels = np.asarray(Image.open(labels_path), dtype=np.int32)
    return LabeledImage(pixels=rgb, labels=labels)
