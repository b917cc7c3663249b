"""Training losses, schedule, warm-up, and step mechanics."""

import math

import numpy as np
import pytest
import torch

from uda_mixlab.model import parameter_vector
from uda_mixlab.synthgen import ignore_id
from uda_mixlab.train import (
    LossBreakdown,
    TrainConfig,
    TrainingDivergenceError,
    ce_seg_loss,
    make_train_state,
    poly_lr,
    total_loss,
    train_step,
    warmup,
)

from conftest import rand_probs, tiny_config

RECORD_KEYS = {"iter", "lr", "l_s", "l_st", "l_hts", "l_pro", "l_pixel", "total"}


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(0, 3000, 0.01) == 0.01
    assert poly_lr(3000, 3000, 0.01) == 0.0
    assert abs(poly_lr(1500, 3000, 1.0, power=0.9) - 0.5358867312681466) < 1e-12


def test_poly_lr_monotone_decreasing():
    values = [poly_lr(i, 100, 0.05) for i in range(101)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_poly_lr_validation():
    with pytest.raises(ValueError):
        poly_lr(5, 0, 0.1)
    with pytest.raises(ValueError):
        poly_lr(11, 10, 0.1)
    with pytest.raises(ValueError):
        poly_lr(-1, 10, 0.1)
    with pytest.raises(ValueError):
        poly_lr(1, 10, -0.1)
    with pytest.raises(ValueError):
        poly_lr(1, 10, 0.1, power=0.0)


def test_ce_loss_uniform_prediction_is_log_c():
    probs = torch.full((4, 6, 6), 0.25, dtype=torch.float64)
    labels = np.random.default_rng(0).integers(4, size=(6, 6)).astype(np.int32)
    result = ce_seg_loss(probs, labels)
    assert not result.degenerate
    assert abs(float(result.value) - math.log(4.0)) < 1e-12


def test_ce_loss_perfect_prediction_is_zero():
    labels = np.random.default_rng(1).integers(3, size=(5, 5)).astype(np.int32)
    probs = torch.zeros(3, 5, 5, dtype=torch.float64)
    for c in range(3):
        probs[c][labels == c] = 1.0
    assert float(ce_seg_loss(probs, labels).value) == 0.0


def test_ce_loss_matches_bruteforce_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        c, h, w = int(rng.integers(2, 6)), 5, 7
        probs = torch.tensor(rand_probs(rng, c, h, w))
        labels = rng.integers(c, size=(h, w)).astype(np.int32)
        labels[rng.random((h, w)) < 0.2] = c
        result = ce_seg_loss(probs, labels, ignore_label=c)
        total = 0.0
        n = 0
        for i in range(h):
            for j in range(w):
                if labels[i, j] != c:
                    total += -math.log(max(float(probs[labels[i, j], i, j]), 1e-30))
                    n += 1
        assert abs(float(result.value) - total / n) < 1e-12


def test_ce_loss_all_ignored_is_degenerate_zero():
    probs = torch.full((3, 4, 4), 1 / 3, dtype=torch.float64)
    labels = np.full((4, 4), 3, dtype=np.int32)
    result = ce_seg_loss(probs, labels, ignore_label=3)
    assert result.degenerate
    assert float(result.value) == 0.0


def test_ce_loss_shape_validation():
    with pytest.raises(ValueError):
        ce_seg_loss(torch.zeros(4, 4), np.zeros((4, 4), dtype=np.int32))
    with pytest.raises(ValueError):
        ce_seg_loss(torch.zeros(2, 4, 4), np.zeros((5, 4), dtype=np.int32))


def test_total_loss_weighted_example():
    lb = LossBreakdown(l_s=1.0, l_st=0.5, l_hts=0.5, l_pro=2.0, l_pixel=3.0)
    assert abs(total_loss(lb, 0.1, 0.01) - 1.15) < 1e-12
    assert total_loss(lb, 0.0, 0.0) == 1.0


def test_total_loss_nan_raises_divergence():
    lb = LossBreakdown(l_s=float("nan"), l_st=0.0, l_hts=0.0, l_pro=0.0, l_pixel=0.0)
    with pytest.raises(TrainingDivergenceError):
        total_loss(lb, 0.1, 0.01)


def test_train_config_validation():
    bad = [
        dict(tau=1.0),
        dict(tau=-0.01),
        dict(lambda1=-0.1),
        dict(lambda2=-0.1),
        dict(s1=0.0),
        dict(s2=-1.0),
        dict(base_lr=0.0),
        dict(head_lr_mult=0.0),
        dict(sgd_momentum=1.0),
        dict(weight_decay=-1.0),
        dict(poly_power=0.0),
        dict(max_iters=0),
        dict(warmup_iters=11, max_iters=10),
        dict(ema_momentum=1.0),
        dict(pixel_sample_n=1),
        dict(grad_accum=0),
        dict(contrast_on="both"),
        dict(contrast_on="hts", use_htcm=False),
        dict(eval_interval=0),
        dict(early_stop_patience=-1),
        dict(checkpoint_interval=-1),
    ]
    for overrides in bad:
        with pytest.raises(ValueError):
            TrainConfig(**overrides).validate()
    TrainConfig().validate()


def test_make_train_state_deterministic():
    cfg = tiny_config()
    a = make_train_state(cfg, 3)
    b = make_train_state(cfg, 3)
    assert torch.equal(parameter_vector(a.student), parameter_vector(b.student))
    assert torch.equal(parameter_vector(a.student), parameter_vector(a.teacher.model))
    c = make_train_state(tiny_config(seed=2), 3)
    assert not torch.equal(parameter_vector(a.student), parameter_vector(c.student))


def test_warmup_copies_teacher_and_logs(tiny_pair):
    cfg = tiny_config(warmup_iters=4, max_iters=10)
    state = make_train_state(cfg, tiny_pair.class_count)
    state = warmup(state, tiny_pair.source, cfg)
    assert state.iteration == 4
    assert torch.equal(parameter_vector(state.teacher.model), parameter_vector(state.student))
    assert [r["iter"] for r in state.history] == [1, 2, 3, 4]
    for rec in state.history:
        assert set(rec) == RECORD_KEYS
        assert rec["l_st"] == 0.0 and rec["total"] == rec["l_s"]
    with pytest.raises(ValueError):
        warmup(state, tiny_pair.source, cfg)


def test_warmup_reduces_source_loss(tiny_pair):
    cfg = tiny_config(base_lr=0.005, warmup_iters=40, max_iters=200, seed=3)
    state = make_train_state(cfg, tiny_pair.class_count)
    state = warmup(state, tiny_pair.source, cfg)
    losses = [r["l_s"] for r in state.history]
    # Windows of 9 cover each of the 3 training scenes equally often.
    assert np.mean(losses[-9:]) < np.mean(losses[:9])


def test_train_step_batch_validation(tiny_pair):
    cfg = tiny_config()
    state = make_train_state(cfg, tiny_pair.class_count)
    with pytest.raises(ValueError):
        train_step(state, [], [], cfg)
    with pytest.raises(ValueError):
        train_step(state, tiny_pair.source[:2], tiny_pair.target[:1], cfg)


def test_train_step_iteration_cap(tiny_pair):
    cfg = tiny_config(max_iters=1, warmup_iters=0, checkpoint_interval=0)
    state = make_train_state(cfg, tiny_pair.class_count)
    state, _ = train_step(state, tiny_pair.source[:1], tiny_pair.target[:1], cfg)
    with pytest.raises(ValueError):
        train_step(state, tiny_pair.source[:1], tiny_pair.target[:1], cfg)


def test_train_step_records_and_head_lr_ratio(tiny_pair):
    cfg = tiny_config()
    state = make_train_state(cfg, tiny_pair.class_count)
    state, breakdown = train_step(state, tiny_pair.source[:1], tiny_pair.target[:1], cfg)
    assert state.iteration == 1
    rec = state.history[-1]
    assert set(rec) == RECORD_KEYS
    assert rec["lr"] == cfg.base_lr
    assert rec["total"] == breakdown.total
    groups = state.optimizer.param_groups
    assert groups[2]["lr"] == pytest.approx(10.0 * groups[0]["lr"], rel=1e-12)
    assert groups[3]["lr"] == pytest.approx(10.0 * groups[1]["lr"], rel=1e-12)
    assert breakdown.l_s > 0.0 and breakdown.l_st > 0.0 and breakdown.l_hts > 0.0


def test_variant_switches_zero_their_terms(tiny_pair):
    cfg = tiny_config(use_htcm=False, use_procl=False, use_picl=False)
    state = make_train_state(cfg, tiny_pair.class_count)
    _, breakdown = train_step(state, tiny_pair.source[:1], tiny_pair.target[:1], cfg)
    assert breakdown.l_hts == 0.0
    assert breakdown.l_pro == 0.0 and breakdown.l_pixel == 0.0


def test_lambda2_zero_update_is_bit_identical(tiny_pair):
    cfg = tiny_config(lambda2=0.0, tau=0.2)
    vecs = []
    for force in (False, True):
        state = make_train_state(cfg, tiny_pair.class_count)
        state, breakdown = train_step(
            state, tiny_pair.source[:1], tiny_pair.target[:1], cfg, force_contrastive=force
        )
        if force:
            assert breakdown.l_pro != 0.0 or breakdown.l_pixel != 0.0
        vecs.append(parameter_vector(state.student))
    assert torch.equal(vecs[0], vecs[1])


def test_training_is_deterministic(tiny_pair):
    histories = []
    vecs = []
    for _ in range(2):
        cfg = tiny_config(max_iters=6, warmup_iters=2)
        state = make_train_state(cfg, tiny_pair.class_count)
        state = warmup(state, tiny_pair.source, cfg)
        for k in range(3):
            state, _ = train_step(state, [tiny_pair.source[k % 3]], [tiny_pair.target[k % 3]], cfg)
        histories.append(state.history)
        vecs.append(parameter_vector(state.student))
    assert histories[0] == histories[1]
    assert torch.equal(vecs[0], vecs[1])


def test_contrast_on_hts_runs(tiny_pair):
    cfg = tiny_config(contrast_on="hts", tau=0.2)
    state = make_train_state(cfg, tiny_pair.class_count)
    state, breakdown = train_step(
        state, tiny_pair.source[:1], tiny_pair.target[:1], cfg, force_contrastive=True
    )
    assert math.isfinite(breakdown.total)


def test_ignore_label_reserved_for_training(tiny_pair):
    assert ignore_id(tiny_pair.class_count) == tiny_pair.class_count
