"""Experiment orchestration: full runs, ablation grids, artifact writing.

A full run is warm-up, adaptation steps with periodic held-out evaluation,
early stopping on an mIoU plateau, and a final report from the best
checkpoint. Ablations re-run training across a variant grid x seeds and
aggregate mean/std per variant.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import os
import statistics
from dataclasses import dataclass, field

import numpy as np
import torch

from uda_mixlab.config import ExperimentConfig, read_config
from uda_mixlab.evaluate import EvalReport, boundary_error_stats, evaluate_model
from uda_mixlab.model import SegModel, save_checkpoint
from uda_mixlab.plots import emit_plots
from uda_mixlab.synthgen import DatasetPair, ignore_id, make_benchmark
from uda_mixlab.train import TrainConfig, TrainState, make_train_state, train_step, warmup

TABLE4_TAUS = (0.0, 0.35, 0.55, 0.75, 0.95, 0.97)


@dataclass(frozen=True)
class VariantSpec:
    """One ablation cell: component switches plus optional overrides."""

    name: str
    use_htcm: bool = True
    use_procl: bool = True
    use_picl: bool = True
    tau: float | None = None
    contrast_on: str | None = None


def apply_variant(config: TrainConfig, variant: VariantSpec, seed: int | None = None) -> TrainConfig:
    updates: dict[str, object] = {
        "use_htcm": variant.use_htcm,
        "use_procl": variant.use_procl,
        "use_picl": variant.use_picl,
    }
    if variant.tau is not None:
        updates["tau"] = variant.tau
    if variant.contrast_on is not None:
        updates["contrast_on"] = variant.contrast_on
    if seed is not None:
        updates["seed"] = seed
    out = dataclasses.replace(config, **updates)
    out.validate()
    return out


def table3_grid() -> list[VariantSpec]:
    """Component power set on top of the class-mixing baseline."""
    rows = []
    for htcm in (False, True):
        for procl in (False, True):
            for picl in (False, True):
                name = "cmix"
                name += "+htcm" if htcm else ""
                name += "+procl" if procl else ""
                name += "+picl" if picl else ""
                rows.append(VariantSpec(name=name, use_htcm=htcm, use_procl=procl, use_picl=picl))
    return rows


def table4_grid(taus: tuple[float, ...] = TABLE4_TAUS) -> list[VariantSpec]:
    """Full method at each confidence threshold."""
    return [VariantSpec(name=f"tau_{t:g}", tau=t) for t in taus]


def table5_grid() -> list[VariantSpec]:
    """Full method contrasting on the class-mixed vs the confidence-mixed sample."""
    return [
        VariantSpec(name="contrast_on_st", contrast_on="st"),
        VariantSpec(name="contrast_on_hts", contrast_on="hts"),
    ]


ABLATION_GRIDS = {"table3": table3_grid, "table4": table4_grid, "table5": table5_grid}


@dataclass
class TrainResult:
    """Outcome of one full training run."""

    state: TrainState
    best_model: SegModel
    best_miou: float
    best_iteration: int
    report: EvalReport
    eval_history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


class _JsonlWriter:
    def __init__(self, path: str | None) -> None:
        self.path = path
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def run_training(pair: DatasetPair, config: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Warm-up + adaptation with periodic eval, early stop, best-model report."""
    config.validate()
    ckpt_dir = None
    log = _JsonlWriter(None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        log = _JsonlWriter(os.path.join(out_dir, "metrics.jsonl"))
    try:
        state = make_train_state(config, pair.class_count)
        ign = ignore_id(pair.class_count)
        state = warmup(state, pair.source, config)
        for rec in state.history:
            log.write(rec)

        best_miou = -1.0
        best_iteration = state.iteration
        best_sd = copy.deepcopy(state.student.state_dict())
        eval_history: list[dict] = []
        stopped_early = False

        def run_eval() -> None:
            nonlocal best_miou, best_iteration, best_sd
            report = evaluate_model(state.student, pair.target_eval, ignore_label=ign)
            rec = {
                "iter": state.iteration,
                "miou": report.miou,
                "boundary_error_fraction": report.boundary_error_fraction,
            }
            eval_history.append(rec)
            log.write(rec)
            if report.miou > best_miou:
                best_miou = report.miou
                best_iteration = state.iteration
                best_sd = copy.deepcopy(state.student.state_dict())

        if pair.target_eval:
            run_eval()
        while state.iteration < config.max_iters:
            src = [pair.source[int(state.rng.integers(len(pair.source)))] for _ in range(config.grad_accum)]
            tgt = [pair.target[int(state.rng.integers(len(pair.target)))] for _ in range(config.grad_accum)]
            state, _ = train_step(state, src, tgt, config)
            log.write(state.history[-1])
            if ckpt_dir and config.checkpoint_interval and state.iteration % config.checkpoint_interval == 0:
                save_checkpoint(state.student, os.path.join(ckpt_dir, f"iter_{state.iteration:06d}.ckpt"))
            if pair.target_eval and state.iteration % config.eval_interval == 0:
                run_eval()
                if (
                    config.early_stop_patience
                    and state.iteration - best_iteration >= config.early_stop_patience
                ):
                    stopped_early = True
                    break
        if pair.target_eval and (not eval_history or eval_history[-1]["iter"] != state.iteration):
            run_eval()

        best_model = copy.deepcopy(state.student)
        best_model.load_state_dict(best_sd)
        if pair.target_eval:
            report = evaluate_model(best_model, pair.target_eval, ignore_label=ign)
        else:
            report = evaluate_model(best_model, pair.target, ignore_label=ign)
        for i, im in enumerate(pair.target_eval):
            pred = best_model.predict_labels(im.pixels)
            stats = boundary_error_stats(pred, im.labels, radius=2, ignore_label=ign)
            log.write(
                {
                    "image_index": i,
                    "error_count": stats.error_count,
                    "boundary_error_fraction": None if stats.no_errors else stats.fraction,
                }
            )
        if ckpt_dir:
            save_checkpoint(state.student, os.path.join(ckpt_dir, "final.ckpt"))
            save_checkpoint(best_model, os.path.join(ckpt_dir, "best.ckpt"))
        return TrainResult(
            state=state,
            best_model=best_model,
            best_miou=best_miou if best_miou >= 0 else report.miou,
            best_iteration=best_iteration,
            report=report,
            eval_history=eval_history,
            stopped_early=stopped_early,
        )
    finally:
        log.close()


@dataclass
class AblationResult:
    rows: list[dict]
    summary: list[dict]


def run_ablation(
    pair: DatasetPair,
    variants: list[VariantSpec],
    seeds: list[int],
    base_config: TrainConfig,
    out_dir: str | None = None,
) -> AblationResult:
    """Train every variant x seed cell; aggregate mean/std mIoU per variant."""
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variant names: {names}")
    rows: list[dict] = []
    for variant in variants:
        for seed in seeds:
            cfg = apply_variant(base_config, variant, seed=seed)
            cell_dir = None
            if out_dir is not None:
                cell_dir = os.path.join(out_dir, "cells", f"{variant.name}_seed{seed}")
            result = run_training(pair, cfg, out_dir=cell_dir)
            row = {
                "variant": variant.name,
                "seed": seed,
                "tau": cfg.tau,
                "miou": result.best_miou,
                "boundary_error_fraction": result.report.boundary_error_fraction,
                "best_iteration": result.best_iteration,
            }
            rows.append(row)
    summary: list[dict] = []
    for variant in variants:
        mious = [r["miou"] for r in rows if r["variant"] == variant.name]
        summary.append(
            {
                "variant": variant.name,
                "n": len(mious),
                "miou_mean": statistics.fmean(mious),
                "miou_std": statistics.stdev(mious) if len(mious) > 1 else 0.0,
            }
        )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_ablation_csv(rows, summary, os.path.join(out_dir, "report.csv"))
        log_path = os.path.join(out_dir, "metrics.jsonl")
        with open(log_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        emit_plots(log_path, os.path.join(out_dir, "plots"))
    return AblationResult(rows=rows, summary=summary)


def _write_ablation_csv(rows: list[dict], summary: list[dict], path: str) -> None:
    columns = ["variant", "seed", "tau", "miou", "boundary_error_fraction", "best_iteration", "miou_mean", "miou_std"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
        for s in summary:
            writer.writerow(
                {"variant": s["variant"], "seed": "aggregate", "miou_mean": s["miou_mean"], "miou_std": s["miou_std"]}
            )


def _write_run_csv(rows: list[dict], class_count: int, path: str) -> None:
    columns = ["seed", "miou", "boundary_error_fraction", "best_iteration"] + [f"iou_{c}" for c in range(class_count)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)


@dataclass
class ExperimentResult:
    out_dir: str
    rows: list[dict]
    files: list[str] = field(default_factory=list)


def run_experiment(
    config: ExperimentConfig | str,
    out_dir: str | None = None,
    seeds: tuple[int, ...] | None = None,
    ablation: str | None = None,
) -> ExperimentResult:
    """Top-level entry used by the CLI run/ablate paths."""
    cfg = read_config(config) if isinstance(config, str) else config
    cfg.validate()
    out = out_dir if out_dir is not None else cfg.out_dir
    run_seeds = list(seeds if seeds is not None else cfg.seeds)
    grid_name = ablation if ablation is not None else cfg.ablation
    os.makedirs(out, exist_ok=True)

    pair = make_benchmark(
        cfg.dataset_seed,
        cfg.source_spec,
        cfg.target_spec,
        cfg.n_source,
        cfg.n_target,
        n_eval=cfg.n_eval,
        height=cfg.height,
        width=cfg.width,
        class_count=cfg.class_count,
    )

    if grid_name is not None:
        if grid_name not in ABLATION_GRIDS:
            raise ValueError(f"unknown ablation grid {grid_name!r}")
        result = run_ablation(pair, ABLATION_GRIDS[grid_name](), run_seeds, cfg.train, out_dir=out)
        files = [os.path.join(out, "report.csv"), os.path.join(out, "metrics.jsonl")]
        return ExperimentResult(out_dir=out, rows=result.rows, files=files)

    rows = []
    files = []
    for seed in run_seeds:
        run_dir = out if len(run_seeds) == 1 else os.path.join(out, f"seed_{seed}")
        cfg_seed = dataclasses.replace(cfg.train, seed=seed)
        result = run_training(pair, cfg_seed, out_dir=run_dir)
        row = {
            "seed": seed,
            "miou": result.report.miou,
            "boundary_error_fraction": result.report.boundary_error_fraction,
            "best_iteration": result.best_iteration,
        }
        for c, iou in result.report.per_class_iou.items():
            row[f"iou_{c}"] = "" if iou is None else iou
        rows.append(row)
        log_path = os.path.join(run_dir, "metrics.jsonl")
        plot_files = emit_plots(log_path, os.path.join(run_dir, "plots"))
        files.extend([log_path] + plot_files)
    report_path = os.path.join(out, "report.csv")
    _write_run_csv(rows, cfg.class_count, report_path)
    files.append(report_path)
    return ExperimentResult(out_dir=out, rows=rows, files=files)
