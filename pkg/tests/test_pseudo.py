"""Pseudo-labeling: argmax/confidence extraction and threshold masks."""

import numpy as np
import pytest
import torch

from uda_mixlab.pseudo import class_confidence_mask, confidence_mask, pseudo_label

from conftest import rand_probs


def test_pseudo_label_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(25):
        probs = rand_probs(rng, int(rng.integers(2, 6)), 7, 9)
        pl = pseudo_label(probs)
        c, h, w = probs.shape
        for i in range(h):
            for j in range(w):
                best = max(range(c), key=lambda k: probs[k, i, j])
                assert pl.labels[i, j] == best
                assert abs(pl.confidence[i, j] - probs[best, i, j]) < 1e-6
        assert pl.class_count == c


def test_pseudo_label_tie_picks_lowest_id():
    probs = np.full((4, 3, 3), 0.25)
    pl = pseudo_label(probs)
    assert np.all(pl.labels == 0)
    assert np.allclose(pl.confidence, 0.25)


def test_pseudo_label_accepts_torch_tensor():
    probs = rand_probs(np.random.default_rng(1), 3, 8, 8)
    a = pseudo_label(probs)
    b = pseudo_label(torch.from_numpy(probs))
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.confidence, b.confidence)


def test_pseudo_label_rejects_invalid_input():
    with pytest.raises(ValueError):
        pseudo_label(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        pseudo_label(np.full((3, 4, 4), 0.5))
    probs = rand_probs(np.random.default_rng(2), 3, 4, 4)
    delta = probs[0, 0, 0] + 0.2
    probs[0, 0, 0] -= delta
    probs[1, 0, 0] += delta
    with pytest.raises(ValueError):
        pseudo_label(probs)


def test_confidence_mask_strictly_above_tau():
    probs = np.zeros((2, 1, 3))
    probs[0] = np.array([[0.5, 0.7, 0.9]])
    probs[1] = 1.0 - probs[0]
    pl = pseudo_label(probs)
    mask = confidence_mask(pl, 0.7)
    assert mask.tolist() == [[False, False, True]]
    assert confidence_mask(pl, 0.0).all()


def test_confidence_mask_tau_range():
    pl = pseudo_label(np.full((2, 2, 2), 0.5))
    for tau in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            confidence_mask(pl, tau)


def test_class_confidence_mask_matches_definition():
    rng = np.random.default_rng(3)
    probs = rand_probs(rng, 4, 10, 10)
    pl = pseudo_label(probs)
    for c in range(4):
        expected = (pl.labels == c) & (pl.confidence > 0.4)
        assert np.array_equal(class_confidence_mask(pl, c, 0.4), expected)
    with pytest.raises(ValueError):
        class_confidence_mask(pl, 4, 0.4)
    with pytest.raises(ValueError):
        class_confidence_mask(pl, 0, 1.0)
