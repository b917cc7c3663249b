"""Flat key=value experiment configuration with exact round trips.

Files use INI sections ([dataset], [source_domain], [target_domain], [train],
[experiment]); every key has a desk-scale default, so an empty file is a valid
config. Floats serialize via repr, which parses back to the identical value.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from uda_mixlab.synthgen import (
    DomainSpec,
    default_source_spec,
    default_target_spec,
    domain_spec_from_items,
    domain_spec_to_items,
)
from uda_mixlab.train import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration; message carries file/line context when known."""


@dataclass
class ExperimentConfig:
    """Everything one experiment needs: data geometry, domains, training, runs."""

    dataset_seed: int = 1
    height: int = 96
    width: int = 96
    class_count: int = 5
    n_source: int = 60
    n_target: int = 60
    n_eval: int = 20
    source_spec: DomainSpec = field(default_factory=default_source_spec)
    target_spec: DomainSpec = field(default_factory=default_target_spec)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (1, 2, 3)
    out_dir: str = "out"
    ablation: str | None = None

    def validate(self) -> None:
        if self.height % 8 or self.width % 8 or self.height <= 0 or self.width <= 0:
            raise ConfigError(f"height and width must be positive multiples of 8, got {self.height}x{self.width}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.n_source < 1 or self.n_target < 1 or self.n_eval < 0:
            raise ConfigError("need n_source >= 1, n_target >= 1, n_eval >= 0")
        if len(self.source_spec.palette) < self.class_count or len(self.target_spec.palette) < self.class_count:
            raise ConfigError("domain palettes must cover class_count classes")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.ablation is not None and self.ablation not in ("table3", "table4", "table5"):
            raise ConfigError(f"unknown ablation grid {self.ablation!r}")
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from exc


_DATASET_KEYS = ("dataset_seed", "height", "width", "class_count", "n_source", "n_target", "n_eval")


def _encode_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_encode_value(v) for v in value)
    return str(value)


def _decode_value(text: str, ftype: object, context: str) -> object:
    text = text.strip()
    try:
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is bool:
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if ftype is str:
            return text
        if ftype == tuple[int, ...]:
            return tuple(int(v) for v in text.split(",")) if text else ()
        if ftype == tuple[int, int]:
            parts = tuple(int(v) for v in text.split(","))
            if len(parts) != 2:
                raise ValueError(f"expected two integers, got {text!r}")
            return parts
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc
    raise ConfigError(f"{context}: unsupported field type {ftype!r}")


def serialize_config(cfg: ExperimentConfig) -> str:
    lines: list[str] = ["[dataset]"]
    for key in _DATASET_KEYS:
        lines.append(f"{key} = {_encode_value(getattr(cfg, key))}")
    for section, spec in (("source_domain", cfg.source_spec), ("target_domain", cfg.target_spec)):
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in domain_spec_to_items(spec).items():
            lines.append(f"{k} = {v}")
    lines.append("")
    lines.append("[train]")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_encode_value(getattr(cfg.train, f.name))}")
    lines.append("")
    lines.append("[experiment]")
    lines.append(f"seeds = {_encode_value(cfg.seeds)}")
    lines.append(f"out_dir = {cfg.out_dir}")
    lines.append(f"ablation = {cfg.ablation if cfg.ablation is not None else ''}")
    return "\n".join(lines) + "\n"


def _find_line(text: str, section: str, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1]
        elif current == section and stripped.split("=")[0].strip() == key:
            return i
    return None


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    known_sections = {"dataset", "source_domain", "target_domain", "train", "experiment"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"{origin}: unknown section [{section}]")

    cfg = ExperimentConfig()

    def fail(section: str, key: str, reason: str) -> ConfigError:
        line = _find_line(text, section, key)
        at = f"{origin}:{line}" if line else origin
        return ConfigError(f"{at}: [{section}] {key}: {reason}")

    if parser.has_section("dataset"):
        for key, raw in parser.items("dataset"):
            if key not in _DATASET_KEYS:
                raise fail("dataset", key, "unknown key")
            setattr(cfg, key, _decode_value(raw, int, f"[dataset] {key}"))

    for section, attr, default in (
        ("source_domain", "source_spec", default_source_spec),
        ("target_domain", "target_spec", default_target_spec),
    ):
        if parser.has_section(section):
            items = dict(parser.items(section))
            try:
                setattr(cfg, attr, domain_spec_from_items(items))
            except (KeyError, ValueError) as exc:
                key = exc.args[0] if isinstance(exc, KeyError) else "palette_0"
                raise fail(section, str(key), str(exc)) from exc

    if parser.has_section("train"):
        train_fields = {f.name: f for f in fields(TrainConfig)}
        values: dict[str, object] = {}
        for key, raw in parser.items("train"):
            if key not in train_fields:
                raise fail("train", key, "unknown key")
            ftype = {
                "stem_widths": tuple[int, int],
            }.get(key, type(getattr(cfg.train, key)))
            try:
                values[key] = _decode_value(raw, ftype, f"[train] {key}")
            except ConfigError as exc:
                raise fail("train", key, str(exc)) from exc
        cfg.train = dataclasses.replace(cfg.train, **values)

    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "seeds":
                cfg.seeds = _decode_value(raw, tuple[int, ...], "[experiment] seeds")  # type: ignore[assignment]
            elif key == "out_dir":
                cfg.out_dir = raw.strip()
            elif key == "ablation":
                cfg.ablation = raw.strip() or None
            else:
                raise fail("experiment", key, "unknown key")

    cfg.validate()
    return cfg


def read_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), origin=path)


def write_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
