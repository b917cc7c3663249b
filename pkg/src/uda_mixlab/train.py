"""Self-training loop: source CE plus mixed-sample CE plus contrastive terms.

Each iteration consumes one source and one target scene (gradient accumulation
over larger batches is config-exposed). The teacher pseudo-labels the target,
two mixed samples are composed (class mixing onto target, high-confidence
target mixing onto source), and the student minimizes

    L = L_s + lambda1 * (L_st + L_hts) + lambda2 * (L_pro + L_pixel)

with SGD under a poly learning-rate schedule; the teacher tracks the student
by exponential moving average. Warm-up spends the first iterations of the
schedule on L_s only, then the teacher is reset to a copy of the student.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import torch

from uda_mixlab.contrast import (
    LossResult,
    compute_prototypes,
    downsample_mask,
    make_view_pair,
    pixel_contrastive_loss,
    proto_contrastive_loss,
)
from uda_mixlab.mix import MixedSample, compose_mixed_sample, sample_classmix_mask
from uda_mixlab.model import ArchSpec, SegModel, TeacherState, copy_into_teacher, ema_update, init_params, make_teacher
from uda_mixlab.pseudo import confidence_mask, pseudo_label
from uda_mixlab.synthgen import LabeledImage, ignore_id


class TrainingDivergenceError(RuntimeError):
    """Raised when the training loss turns NaN; carries the loss breakdown."""

    def __init__(self, message: str, breakdown: "LossBreakdown | None" = None) -> None:
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    """All training knobs with desk-scale defaults."""

    seed: int = 0
    tau: float = 0.95
    lambda1: float = 0.1
    lambda2: float = 0.01
    s1: float = 7.0
    s2: float = 20.0
    base_lr: float = 0.0025
    head_lr_mult: float = 10.0
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    max_iters: int = 3000
    warmup_iters: int = 300
    ema_momentum: float = 0.99
    pixel_sample_n: int = 128
    grad_accum: int = 1
    feature_width: int = 32
    stem_widths: tuple[int, int] = (16, 24)
    use_htcm: bool = True
    use_procl: bool = True
    use_picl: bool = True
    contrast_on: str = "st"
    st_confidence_filter: bool = False
    contrast_freeze_classifier: bool = False
    eval_interval: int = 125
    early_stop_patience: int = 500
    checkpoint_interval: int = 1000

    def validate(self) -> None:
        if not (0.0 <= self.tau < 1.0):
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.s1 <= 0 or self.s2 <= 0:
            raise ValueError("similarity scales must be > 0")
        if self.base_lr <= 0 or self.head_lr_mult <= 0:
            raise ValueError("learning rates must be > 0")
        if not (0.0 <= self.sgd_momentum < 1.0):
            raise ValueError(f"sgd_momentum must lie in [0, 1), got {self.sgd_momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be > 0")
        if self.max_iters < 1 or not (0 <= self.warmup_iters <= self.max_iters):
            raise ValueError("need 0 <= warmup_iters <= max_iters and max_iters >= 1")
        if not (0.0 <= self.ema_momentum < 1.0):
            raise ValueError(f"ema_momentum must lie in [0, 1), got {self.ema_momentum}")
        if self.pixel_sample_n < 2:
            raise ValueError("pixel_sample_n must be >= 2")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")
        if self.contrast_on not in ("st", "hts"):
            raise ValueError(f"contrast_on must be 'st' or 'hts', got {self.contrast_on!r}")
        if self.contrast_on == "hts" and not self.use_htcm:
            raise ValueError("contrast_on='hts' requires use_htcm")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.early_stop_patience < 0 or self.checkpoint_interval < 0:
            raise ValueError("patience and checkpoint interval must be >= 0")


@dataclass
class LossBreakdown:
    """Per-term loss values of one step, as plain floats."""

    l_s: float
    l_st: float
    l_hts: float
    l_pro: float
    l_pixel: float
    total: float = math.nan


def total_loss(lb: LossBreakdown, lambda1: float, lambda2: float) -> float:
    """Combine the breakdown; NaN anywhere raises a divergence error."""
    value = lb.l_s + lambda1 * (lb.l_st + lb.l_hts) + lambda2 * (lb.l_pro + lb.l_pixel)
    if math.isnan(value):
        raise TrainingDivergenceError(f"non-finite training loss: {lb!r}", lb)
    return value


def poly_lr(iteration: int, max_iters: int, base_lr: float, power: float = 0.9) -> float:
    """base_lr * (1 - iteration / max_iters) ** power."""
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if not (0 <= iteration <= max_iters):
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    if base_lr < 0 or power <= 0:
        raise ValueError("base_lr must be >= 0 and power > 0")
    return base_lr * (1.0 - iteration / max_iters) ** power


def ce_seg_loss(
    pred: torch.Tensor,
    labels: np.ndarray,
    ignore_label: int | None = None,
) -> LossResult:
    """Mean over non-ignored pixels of -log p[label]; flagged zero if all ignored."""
    if pred.ndim != 3:
        raise ValueError(f"prediction must be (C, H, W), got shape {tuple(pred.shape)}")
    if labels.shape != tuple(pred.shape[1:]):
        raise ValueError(f"label shape {labels.shape} does not match prediction {tuple(pred.shape[1:])}")
    lab = torch.from_numpy(np.ascontiguousarray(labels)).long().reshape(-1)
    keep = torch.ones_like(lab, dtype=torch.bool) if ignore_label is None else lab != ignore_label
    if not bool(keep.any()):
        return LossResult(torch.zeros((), dtype=pred.dtype), True)
    flat = pred.reshape(pred.shape[0], -1)
    picked = flat.T[keep].gather(1, lab[keep].unsqueeze(1)).squeeze(1)
    return LossResult(-torch.log(torch.clamp_min(picked, 1e-30)).mean(), False)


@dataclass
class TrainState:
    """Mutable training state: models, optimizer, step counter, rng, history."""

    student: SegModel
    teacher: TeacherState
    optimizer: torch.optim.SGD
    iteration: int
    rng: np.random.Generator
    history: list[dict[str, Any]] = field(default_factory=list)


def _build_optimizer(student: SegModel, config: TrainConfig) -> torch.optim.SGD:
    """Four groups: encoder/head x weight/bias; biases skip weight decay."""
    head_ids = {id(p) for p in student.classifier.parameters()}
    enc_w, enc_b, head_w, head_b = [], [], [], []
    for name, p in student.named_parameters():
        is_head = id(p) in head_ids
        is_bias = name.endswith("bias")
        if is_head and is_bias:
            head_b.append(p)
        elif is_head:
            head_w.append(p)
        elif is_bias:
            enc_b.append(p)
        else:
            enc_w.append(p)
    groups = [
        {"params": enc_w, "weight_decay": config.weight_decay, "lr_mult": 1.0},
        {"params": enc_b, "weight_decay": 0.0, "lr_mult": 1.0},
        {"params": head_w, "weight_decay": config.weight_decay, "lr_mult": config.head_lr_mult},
        {"params": head_b, "weight_decay": 0.0, "lr_mult": config.head_lr_mult},
    ]
    return torch.optim.SGD(groups, lr=config.base_lr, momentum=config.sgd_momentum)


def make_train_state(config: TrainConfig, class_count: int) -> TrainState:
    config.validate()
    arch = ArchSpec(
        class_count=class_count,
        feature_width=config.feature_width,
        stem_widths=tuple(config.stem_widths),
    )
    student = init_params(config.seed, arch)
    teacher = make_teacher(student, config.ema_momentum)
    return TrainState(
        student=student,
        teacher=teacher,
        optimizer=_build_optimizer(student, config),
        iteration=0,
        rng=np.random.default_rng(np.random.SeedSequence([int(config.seed) & 0xFFFFFFFFFFFFFFFF, 0x7EA1])),
        history=[],
    )


def _set_lr(optimizer: torch.optim.SGD, iteration: int, config: TrainConfig) -> float:
    lr = poly_lr(iteration, config.max_iters, config.base_lr, config.poly_power)
    for group in optimizer.param_groups:
        group["lr"] = lr * group["lr_mult"]
    return lr


def _composite_mixes(
    teacher_probs: torch.Tensor,
    source: LabeledImage,
    target: LabeledImage,
    config: TrainConfig,
    rng: np.random.Generator,
    class_count: int,
) -> tuple[MixedSample, np.ndarray, np.ndarray, MixedSample | None, np.ndarray | None]:
    """Compose x_st and (optionally) x_hts with per-pixel label confidences.

    Confidence is 1 on pixels whose label comes from source ground truth and
    the teacher's winning probability on pseudo-labeled pixels.
    """
    ign = ignore_id(class_count)
    pl = pseudo_label(teacher_probs)
    target_pl = LabeledImage(pixels=target.pixels, labels=pl.labels)

    m_cls = sample_classmix_mask(source.labels, rng, ignore_label=ign)
    st = compose_mixed_sample(base=target_pl, paste=source, mask=m_cls)
    st_conf = np.where(m_cls, np.float32(1.0), pl.confidence)
    st_labels = st.labels
    if config.st_confidence_filter:
        st_labels = np.where(st_conf > config.tau, st_labels, ign).astype(np.int32)

    hts = None
    hts_conf = None
    if config.use_htcm:
        m_ht = confidence_mask(pl, config.tau)
        hts = compose_mixed_sample(base=source, paste=target_pl, mask=m_ht)
        hts_conf = np.where(m_ht, pl.confidence, np.float32(1.0))
    return st, st_labels, st_conf, hts, hts_conf


def _contrastive_terms(
    student: SegModel,
    sample_pixels: np.ndarray,
    sample_labels: np.ndarray,
    sample_conf: np.ndarray,
    sample_pseudo: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    class_count: int,
) -> tuple[LossResult, LossResult]:
    """Two-view prototype and pixel losses on one mixed sample.

    Pixel anchors are drawn only from pseudo-labeled (target-origin) cells;
    ground-truth pixels carry no pseudo-label confidence to select on.
    """
    views = make_view_pair(sample_pixels, rng)
    f1, _ = student(views.view1)
    f2, _ = student(views.view2)
    weights = student.head_weights()
    if config.contrast_freeze_classifier:
        weights = (weights[0].detach(), weights[1].detach())

    confident = sample_conf > config.tau
    zero = torch.zeros((), dtype=f1.dtype)
    l_pro = LossResult(zero, True)
    if config.use_procl:
        class_masks = {
            c: downsample_mask((sample_labels == c) & confident) for c in range(class_count)
        }
        ps1 = compute_prototypes(f1, class_masks)
        ps2 = compute_prototypes(f2, class_masks)
        l_pro = proto_contrastive_loss(ps1, ps2, weights, config.s1)

    l_pix = LossResult(zero, True)
    if config.use_picl:
        valid = downsample_mask(sample_pseudo & (sample_labels < class_count) & confident)
        positions = np.argwhere(valid)
        if len(positions) >= 2:
            take = min(config.pixel_sample_n, len(positions))
            sel = rng.choice(len(positions), size=take, replace=False)
            l_pix = pixel_contrastive_loss(f1, f2, weights, config.s2, positions[sel])
    return l_pro, l_pix


def _pair_losses(
    state: TrainState,
    source: LabeledImage,
    target: LabeledImage,
    config: TrainConfig,
    class_count: int,
    force_contrastive: bool = False,
) -> tuple[torch.Tensor, LossBreakdown]:
    ign = ignore_id(class_count)
    with torch.no_grad():
        _, teacher_probs = state.teacher.model(target.pixels)
    st, st_labels, st_conf, hts, hts_conf = _composite_mixes(
        teacher_probs, source, target, config, state.rng, class_count
    )

    _, p_s = state.student(source.pixels)
    l_s = ce_seg_loss(p_s, source.labels, ignore_label=ign)
    _, p_st = state.student(st.pixels)
    l_st = ce_seg_loss(p_st, st_labels, ignore_label=ign)

    zero = torch.zeros((), dtype=p_s.dtype)
    l_hts = LossResult(zero, True)
    if hts is not None:
        _, p_hts = state.student(hts.pixels)
        l_hts = ce_seg_loss(p_hts, hts.labels, ignore_label=ign)

    l_pro = LossResult(zero, True)
    l_pix = LossResult(zero, True)
    want_contrast = (config.use_procl or config.use_picl) and (config.lambda2 > 0 or force_contrastive)
    if want_contrast:
        if config.contrast_on == "hts":
            assert hts is not None and hts_conf is not None
            sample_pixels, sample_labels, sample_conf = hts.pixels, hts.labels, hts_conf
            sample_pseudo = hts.paste_mask
        else:
            sample_pixels, sample_labels, sample_conf = st.pixels, st_labels, st_conf
            sample_pseudo = ~st.paste_mask
        l_pro, l_pix = _contrastive_terms(
            state.student, sample_pixels, sample_labels, sample_conf, sample_pseudo,
            config, state.rng, class_count
        )

    tensor_total = (
        l_s.value
        + config.lambda1 * (l_st.value + l_hts.value)
        + config.lambda2 * (l_pro.value + l_pix.value)
    )
    breakdown = LossBreakdown(
        l_s=float(l_s.value.detach()),
        l_st=float(l_st.value.detach()),
        l_hts=float(l_hts.value.detach()),
        l_pro=float(l_pro.value.detach()),
        l_pixel=float(l_pix.value.detach()),
    )
    breakdown.total = total_loss(breakdown, config.lambda1, config.lambda2)
    if bool(torch.isnan(tensor_total)):
        raise TrainingDivergenceError(f"non-finite training loss: {breakdown!r}", breakdown)
    return tensor_total, breakdown


def train_step(
    state: TrainState,
    source_batch: list[LabeledImage],
    target_batch: list[LabeledImage],
    config: TrainConfig,
    class_count: int | None = None,
    force_contrastive: bool = False,
) -> tuple[TrainState, LossBreakdown]:
    """One adaptation step: accumulate over paired scenes, then SGD + EMA."""
    if len(source_batch) < 1 or len(target_batch) < 1:
        raise ValueError("batches must contain at least one scene each")
    if len(source_batch) != len(target_batch):
        raise ValueError(
            f"source and target batch sizes differ: {len(source_batch)} vs {len(target_batch)}"
        )
    if state.iteration >= config.max_iters:
        raise ValueError(f"iteration {state.iteration} exceeds max_iters {config.max_iters}")
    c = class_count if class_count is not None else state.student.arch.class_count

    lr = _set_lr(state.optimizer, state.iteration, config)
    state.optimizer.zero_grad()
    n = len(source_batch)
    sums = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    for s_img, t_img in zip(source_batch, target_batch):
        tensor_total, bd = _pair_losses(state, s_img, t_img, config, c, force_contrastive)
        (tensor_total / n).backward()
        for name in ("l_s", "l_st", "l_hts", "l_pro", "l_pixel", "total"):
            setattr(sums, name, getattr(sums, name) + getattr(bd, name) / n)
    state.optimizer.step()
    ema_update(state.teacher, state.student)
    state.iteration += 1
    record = {
        "iter": state.iteration,
        "lr": lr,
        "l_s": sums.l_s,
        "l_st": sums.l_st,
        "l_hts": sums.l_hts,
        "l_pro": sums.l_pro,
        "l_pixel": sums.l_pixel,
        "total": sums.total,
    }
    state.history.append(record)
    return state, sums


def warmup(state: TrainState, benchmark_source: list[LabeledImage], config: TrainConfig) -> TrainState:
    """Source-only CE for warmup_iters steps, then teacher <- student copy."""
    if state.iteration != 0:
        raise ValueError("warm-up must run from iteration 0")
    ign = ignore_id(state.student.arch.class_count)
    for _ in range(config.warmup_iters):
        idx = int(state.rng.integers(len(benchmark_source)))
        img = benchmark_source[idx]
        lr = _set_lr(state.optimizer, state.iteration, config)
        state.optimizer.zero_grad()
        _, probs = state.student(img.pixels)
        loss = ce_seg_loss(probs, img.labels, ignore_label=ign)
        loss.value.backward()
        state.optimizer.step()
        state.iteration += 1
        l_s = float(loss.value.detach())
        state.history.append(
            {
                "iter": state.iteration,
                "lr": lr,
                "l_s": l_s,
                "l_st": 0.0,
                "l_hts": 0.0,
                "l_pro": 0.0,
                "l_pixel": 0.0,
                "total": l_s,
            }
        )
    copy_into_teacher(state.teacher, state.student)
    return state
