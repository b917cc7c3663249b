"""Shared fixtures: single-threaded torch and tiny reusable benchmarks."""

import numpy as np
import pytest
import torch

from uda_mixlab.synthgen import DEFAULT_PALETTE, DomainSpec, make_benchmark
from uda_mixlab.train import TrainConfig

torch.set_num_threads(1)


def tiny_specs(class_count=3):
    src = DomainSpec(palette=DEFAULT_PALETTE[:class_count], noise_std=0.03, texture_amp=0.1, seed=11)
    tgt = DomainSpec(
        palette=DEFAULT_PALETTE[:class_count],
        color_shift=(0.1, 0.08, 0.12),
        noise_std=0.05,
        texture_freq=5.0,
        texture_amp=0.15,
        seed=12,
    )
    return src, tgt


@pytest.fixture(scope="session")
def tiny_pair():
    """Small 32x32 three-class benchmark shared by integration tests."""
    src, tgt = tiny_specs()
    return make_benchmark(7, src, tgt, 3, 3, 2, height=32, width=32, class_count=3)


def tiny_config(**overrides):
    base = dict(
        seed=1,
        max_iters=8,
        warmup_iters=3,
        eval_interval=2,
        early_stop_patience=0,
        checkpoint_interval=4,
        base_lr=0.01,
        pixel_sample_n=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


def rand_probs(rng, class_count, h, w):
    """Random normalized (C, h, w) probability maps."""
    raw = rng.gamma(2.0, size=(class_count, h, w))
    return (raw / raw.sum(axis=0)).astype(np.float64)
