"""Metrics: confusion-matrix IoU, boundary bands, selective error rates."""

import numpy as np
import pytest

from uda_mixlab.evaluate import (
    boundary_error_stats,
    compute_miou,
    evaluate_model,
    selective_error_rates,
    semantic_boundary_mask,
)
from uda_mixlab.model import ArchSpec, init_params
from uda_mixlab.synthgen import ignore_id


def miou_oracle(predictions, ground_truths, class_count, ignore_label=None):
    """Per-class nested-loop IoU reference."""
    tp = np.zeros(class_count, dtype=np.int64)
    fp = np.zeros(class_count, dtype=np.int64)
    fn = np.zeros(class_count, dtype=np.int64)
    for pred, gt in zip(predictions, ground_truths):
        for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
            if ignore_label is not None and g == ignore_label:
                continue
            if p == g:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
    per_class = {}
    defined = []
    for c in range(class_count):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            per_class[c] = None
        else:
            per_class[c] = float(tp[c] / denom)
            defined.append(per_class[c])
    return per_class, float(np.mean(defined))


def test_miou_perfect_prediction():
    gt = np.random.default_rng(0).integers(3, size=(8, 8)).astype(np.int32)
    report = compute_miou([gt.copy()], [gt], 3)
    assert report.miou == 1.0
    assert all(v == 1.0 for v in report.per_class_iou.values())
    assert int(report.confusion.sum()) == 64


def test_miou_quarter_example():
    gt = np.zeros((4, 4), dtype=np.int32)
    gt[:2] = 1
    pred = np.zeros((4, 4), dtype=np.int32)
    report = compute_miou([pred], [gt], 2)
    assert report.per_class_iou[0] == 0.5
    assert report.per_class_iou[1] == 0.0
    assert report.miou == 0.25


def test_miou_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        c = int(rng.integers(2, 6))
        preds = [rng.integers(c, size=(6, 7)).astype(np.int32) for _ in range(3)]
        gts = [rng.integers(c, size=(6, 7)).astype(np.int32) for _ in range(3)]
        report = compute_miou(preds, gts, c)
        per_class, miou = miou_oracle(preds, gts, c)
        assert report.per_class_iou == per_class
        assert abs(report.miou - miou) < 1e-15


def test_miou_respects_ignore_label():
    rng = np.random.default_rng(2)
    preds = [rng.integers(3, size=(6, 6)).astype(np.int32)]
    gts = [rng.integers(3, size=(6, 6)).astype(np.int32)]
    gts[0][gts[0] == 2] = 3
    report = compute_miou(preds, gts, 3, ignore_label=3)
    per_class, miou = miou_oracle(preds, gts, 3, ignore_label=3)
    assert report.per_class_iou == per_class
    assert abs(report.miou - miou) < 1e-15


def test_miou_confusion_additivity():
    rng = np.random.default_rng(3)
    preds = [rng.integers(4, size=(5, 5)).astype(np.int32) for _ in range(4)]
    gts = [rng.integers(4, size=(5, 5)).astype(np.int32) for _ in range(4)]
    whole = compute_miou(preds, gts, 4)
    stacked = compute_miou([np.concatenate(preds)], [np.concatenate(gts)], 4)
    assert np.array_equal(whole.confusion, stacked.confusion)
    assert whole.miou == stacked.miou
    shuffled = compute_miou(preds[::-1], gts[::-1], 4)
    assert np.array_equal(whole.confusion, shuffled.confusion)


def test_miou_undefined_class_excluded():
    gt = np.zeros((4, 4), dtype=np.int32)
    gt[0, 0] = 1
    pred = gt.copy()
    report = compute_miou([pred], [gt], 3)
    assert report.per_class_iou[2] is None
    assert report.miou == 1.0


def test_miou_validation_errors():
    gt = np.zeros((4, 4), dtype=np.int32)
    with pytest.raises(ValueError):
        compute_miou([], [], 3)
    with pytest.raises(ValueError):
        compute_miou([gt], [gt, gt], 3)
    with pytest.raises(ValueError):
        compute_miou([np.zeros((3, 3), dtype=np.int32)], [gt], 3)
    with pytest.raises(ValueError):
        compute_miou([gt + 5], [gt], 3)
    with pytest.raises(ValueError):
        compute_miou([np.full((4, 4), 2, dtype=np.int32)], [np.full((4, 4), 2, dtype=np.int32)], 3, ignore_label=2)


def test_semantic_boundary_mask_hand_case():
    gt = np.zeros((4, 6), dtype=np.int32)
    gt[:, 3:] = 1
    band = semantic_boundary_mask(gt)
    expected = np.zeros((4, 6), dtype=bool)
    expected[:, 2:4] = True
    assert np.array_equal(band, expected)


def test_semantic_boundary_ignores_ignore_label():
    gt = np.zeros((4, 6), dtype=np.int32)
    gt[:, 3:] = 2
    band = semantic_boundary_mask(gt, ignore_label=2)
    assert not band.any()


def test_boundary_error_stats_hand_case():
    gt = np.zeros((8, 8), dtype=np.int32)
    gt[:, 4:] = 1
    pred = gt.copy()
    pred[0, 3] = 1
    pred[1, 5] = 0
    pred[7, 0] = 1
    pred[6, 1] = 1
    stats = boundary_error_stats(pred, gt, radius=1)
    assert stats.error_count == 4
    assert stats.boundary_error_count == 2
    assert stats.fraction == 0.5


def test_boundary_error_stats_radius_zero_and_growth():
    gt = np.zeros((8, 8), dtype=np.int32)
    gt[:, 4:] = 1
    pred = gt.copy()
    pred[2, 1] = 1
    assert boundary_error_stats(pred, gt, radius=0).fraction == 0.0
    assert boundary_error_stats(pred, gt, radius=1).fraction == 0.0
    assert boundary_error_stats(pred, gt, radius=2).fraction == 1.0


def test_boundary_error_stats_no_errors():
    gt = np.zeros((6, 6), dtype=np.int32)
    stats = boundary_error_stats(gt.copy(), gt, radius=2)
    assert stats.no_errors
    assert stats.fraction == 0.0 and stats.error_count == 0


def test_boundary_error_stats_validation():
    gt = np.zeros((6, 6), dtype=np.int32)
    with pytest.raises(ValueError):
        boundary_error_stats(gt, gt[:4], radius=1)
    with pytest.raises(ValueError):
        boundary_error_stats(gt, gt, radius=-1)


def test_boundary_error_stats_ignore_label():
    gt = np.zeros((6, 6), dtype=np.int32)
    gt[:, 3:] = 2
    pred = np.zeros((6, 6), dtype=np.int32)
    pred[0, 0] = 1
    stats = boundary_error_stats(pred, gt, radius=2, ignore_label=2)
    assert stats.error_count == 1
    assert stats.boundary_error_count == 0


def test_evaluate_model_consistent_with_parts(tiny_pair):
    model = init_params(0, ArchSpec(class_count=3, feature_width=8, stem_widths=(6, 8)))
    ign = ignore_id(3)
    report = evaluate_model(model, tiny_pair.target_eval, boundary_radius=2, ignore_label=ign)
    preds = [model.predict_labels(im.pixels) for im in tiny_pair.target_eval]
    gts = [im.labels for im in tiny_pair.target_eval]
    again = compute_miou(preds, gts, 3, ignore_label=ign)
    assert report.miou == again.miou
    assert np.array_equal(report.confusion, again.confusion)
    err = near = 0
    for p, g in zip(preds, gts):
        s = boundary_error_stats(p, g, radius=2, ignore_label=ign)
        err += s.error_count
        near += s.boundary_error_count
    expected = (near / err) if err else None
    assert report.boundary_error_fraction == expected


def test_selective_error_rates_uniform_model(tiny_pair):
    model = init_params(0, ArchSpec(class_count=3, feature_width=8, stem_widths=(6, 8)), zero_init=True)
    overall, selective, kept = selective_error_rates(model, tiny_pair.target_eval, 0.95)
    assert kept == 0
    assert selective == 0.0
    wrong = total = 0
    for im in tiny_pair.target_eval:
        wrong += int((im.labels != 0).sum())
        total += im.labels.size
    assert abs(overall - wrong / total) < 1e-12
