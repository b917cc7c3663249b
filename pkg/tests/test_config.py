"""Config parsing: exact round trips and line-precise error reporting."""

import dataclasses

import pytest

from uda_mixlab.config import (
    ConfigError,
    ExperimentConfig,
    parse_config,
    read_config,
    serialize_config,
    write_config,
)
from uda_mixlab.synthgen import DEFAULT_PALETTE, DomainSpec


def test_default_roundtrip_identity():
    cfg = ExperimentConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_empty_config_is_all_defaults():
    assert parse_config("") == ExperimentConfig()


def test_custom_roundtrip_identity():
    cfg = ExperimentConfig(
        dataset_seed=9,
        height=64,
        width=32,
        class_count=3,
        n_source=5,
        n_target=6,
        n_eval=2,
        source_spec=DomainSpec(palette=DEFAULT_PALETTE[:3], noise_std=0.07, texture_amp=0.11, seed=21),
        target_spec=DomainSpec(
            palette=DEFAULT_PALETTE[:3], color_shift=(0.05, -0.125, 0.2), noise_std=0.09, seed=22
        ),
        seeds=(4, 5, 6),
        out_dir="results",
        ablation="table4",
    )
    cfg.train = dataclasses.replace(
        cfg.train, tau=0.75, lambda2=0.005, max_iters=50, warmup_iters=5, stem_widths=(4, 6)
    )
    text = serialize_config(cfg)
    assert parse_config(text) == cfg


def test_file_roundtrip(tmp_path):
    cfg = ExperimentConfig(n_source=4, n_target=4, n_eval=1, height=32, width=32)
    cfg.train = dataclasses.replace(cfg.train, max_iters=10, warmup_iters=2)
    path = str(tmp_path / "exp.cfg")
    write_config(cfg, path)
    assert read_config(path) == cfg


def test_unknown_key_reports_line_number():
    text = "[dataset]\nheight = 32\nnonsense = 1\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text, origin="exp.cfg")
    assert "exp.cfg:3" in str(exc.value)
    assert "nonsense" in str(exc.value)


def test_unknown_train_key_reports_line_number():
    text = "[train]\nmax_iters = 10\nwarmup_iters = 2\nbogus = 7\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text, origin="exp.cfg")
    assert "exp.cfg:4" in str(exc.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config("[surprise]\nx = 1\n")
    assert "surprise" in str(exc.value)


def test_bad_value_type_reported_with_context():
    with pytest.raises(ConfigError) as exc:
        parse_config("[dataset]\nheight = thirty\n")
    assert "height" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config("[train]\ntau = maybe\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\nuse_htcm = definitely\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\nstem_widths = 4\n")


def test_validation_failures_carry_section():
    with pytest.raises(ConfigError) as exc:
        parse_config("[train]\ntau = 1.5\n")
    assert "[train]" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config("[dataset]\nheight = 31\n")
    with pytest.raises(ConfigError):
        parse_config("[dataset]\nclass_count = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nseeds =\n")
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nablation = table9\n")
    with pytest.raises(ConfigError):
        parse_config("[train]\ncontrast_on = hts\nuse_htcm = false\n")


def test_domain_section_overrides():
    text = "[target_domain]\npalette_0 = 0.1,0.2,0.3\npalette_1 = 0.4,0.5,0.6\ncolor_shift = 0.0,0.0,0.0\nnoise_std = 0.0\ntexture_freq = 4.0\ntexture_amp = 0.0\nseed = 5\n[dataset]\nclass_count = 2\n"
    cfg = parse_config(text)
    assert cfg.target_spec.palette == ((0.1, 0.2, 0.3), (0.4, 0.5, 0.6))
    assert cfg.target_spec.seed == 5
    assert cfg.class_count == 2


def test_domain_section_missing_key_reported():
    with pytest.raises(ConfigError):
        parse_config("[source_domain]\npalette_0 = 0.1,0.2,0.3\n")


def test_malformed_ini_reported():
    with pytest.raises(ConfigError):
        parse_config("not an ini file at all")
