"""Command-line front end.

Subcommands: run (full experiment), ablate (variant grid), eval (checkpoint on
the benchmark eval split), gen-data (PNG scene dumps), grad-check (finite
difference suite), dry-run (validate config and print resolved values).
UDA_MIXLAB_THREADS caps torch's thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import torch

from uda_mixlab import experiment as exp
from uda_mixlab.config import ConfigError, ExperimentConfig, read_config, serialize_config
from uda_mixlab.evaluate import evaluate_model
from uda_mixlab.gradcheck import LOSS_NAMES, run_gradient_checks
from uda_mixlab.mix import compose_mixed_sample, sample_classmix_mask, save_triptych
from uda_mixlab.model import load_checkpoint
from uda_mixlab.synthgen import ignore_id, make_benchmark, write_scene_png
from uda_mixlab.train import TrainingDivergenceError

GRAD_TOLERANCE = 1e-4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="config file (defaults apply if omitted)")
    p.add_argument("--seed", type=int, action="append", default=None, help="training seed, repeatable")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated training seeds")
    p.add_argument("--out", type=str, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uda-mixlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and evaluate one experiment")
    _add_common(p_run)
    p_run.add_argument("--ablation", choices=sorted(exp.ABLATION_GRIDS), default=None)
    p_run.add_argument("--dry-run", action="store_true", help="validate config and exit")

    p_abl = sub.add_parser("ablate", help="run a variant grid across seeds")
    _add_common(p_abl)
    p_abl.add_argument("--ablation", choices=sorted(exp.ABLATION_GRIDS), required=True)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the benchmark eval split")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)

    p_gen = sub.add_parser("gen-data", help="write benchmark scenes as PNG files")
    _add_common(p_gen)
    p_gen.add_argument("--triptychs", type=int, default=0, help="also dump N class-mixing triptychs")

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--eps", type=float, default=1e-5)

    p_dry = sub.add_parser("dry-run", help="validate config and print resolved values")
    p_dry.add_argument("--config", type=str, default=None)
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = read_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    cfg.validate()
    return cfg


def _seed_override(args: argparse.Namespace) -> tuple[int, ...] | None:
    seeds: list[int] = []
    if getattr(args, "seed", None):
        seeds.extend(args.seed)
    if getattr(args, "seeds", None):
        try:
            seeds.extend(int(v) for v in args.seeds.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"--seeds must be comma-separated integers: {exc}") from exc
    return tuple(seeds) if seeds else None


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        return _cmd_dry_run(args)
    result = exp.run_experiment(cfg, out_dir=args.out, seeds=_seed_override(args), ablation=args.ablation)
    for row in result.rows:
        print(json.dumps(row))
    print(f"wrote {result.out_dir}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    result = exp.run_experiment(cfg, out_dir=args.out, seeds=_seed_override(args), ablation=args.ablation)
    for row in result.rows:
        print(json.dumps(row))
    print(f"wrote {result.out_dir}")
    return 0


def _benchmark_from(cfg: ExperimentConfig):
    return make_benchmark(
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


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    if model.arch.class_count != cfg.class_count:
        raise ConfigError(
            f"checkpoint has {model.arch.class_count} classes but config asks for {cfg.class_count}"
        )
    pair = _benchmark_from(cfg)
    report = evaluate_model(model, pair.target_eval or pair.target, ignore_label=ignore_id(cfg.class_count))
    payload = {
        "miou": report.miou,
        "boundary_error_fraction": report.boundary_error_fraction,
        "per_class_iou": {str(c): v for c, v in report.per_class_iou.items()},
    }
    print(json.dumps(payload))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write("miou,boundary_error_fraction," + ",".join(f"iou_{c}" for c in report.per_class_iou) + "\n")
            ious = ",".join("" if v is None else repr(v) for v in report.per_class_iou.values())
            bef = "" if report.boundary_error_fraction is None else repr(report.boundary_error_fraction)
            fh.write(f"{report.miou!r},{bef},{ious}\n")
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = args.out or os.path.join(cfg.out_dir, "data")
    pair = _benchmark_from(cfg)
    for split, images in (("source", pair.source), ("target", pair.target), ("target_eval", pair.target_eval)):
        split_dir = os.path.join(out, split)
        os.makedirs(split_dir, exist_ok=True)
        for i, im in enumerate(images):
            write_scene_png(
                im,
                os.path.join(split_dir, f"scene_{i:04d}.png"),
                os.path.join(split_dir, f"scene_{i:04d}_labels.png"),
            )
    if args.triptychs > 0:
        mix_dir = os.path.join(out, "triptychs")
        os.makedirs(mix_dir, exist_ok=True)
        rng = np.random.default_rng(cfg.dataset_seed)
        for k in range(args.triptychs):
            src = pair.source[k % len(pair.source)]
            tgt = pair.target[k % len(pair.target)]
            mask = sample_classmix_mask(src.labels, rng, ignore_label=ignore_id(cfg.class_count))
            mixed = compose_mixed_sample(base=tgt, paste=src, mask=mask)
            save_triptych(tgt, src, mixed, os.path.join(mix_dir, f"classmix_{k:03d}.png"))
    print(f"wrote {out}")
    return 0


def _cmd_grad_check(args: argparse.Namespace) -> int:
    errors = run_gradient_checks(seed=args.seed, eps=args.eps)
    worst = 0.0
    for name in LOSS_NAMES:
        err = errors[name]
        worst = max(worst, err)
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name:8s} max_rel_err={err:.3e}  {status}")
    if worst >= GRAD_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:.0e}", file=sys.stderr)
        return 1
    return 0


def _cmd_dry_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    sys.stdout.write(serialize_config(cfg))
    train = cfg.train
    print(
        f"# resolved: tau={train.tau} lambda1={train.lambda1} lambda2={train.lambda2} "
        f"s1={train.s1} s2={train.s2} max_iters={train.max_iters} warmup_iters={train.warmup_iters}"
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("UDA_MIXLAB_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring non-integer UDA_MIXLAB_THREADS={threads!r}", file=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "ablate": _cmd_ablate,
        "eval": _cmd_eval,
        "gen-data": _cmd_gen_data,
        "grad-check": _cmd_grad_check,
        "dry-run": _cmd_dry_run,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as exc:
        dump_dir = getattr(args, "out", None) or "."
        os.makedirs(dump_dir, exist_ok=True)
        dump_path = os.path.join(dump_dir, "divergence_dump.json")
        payload = {"error": str(exc)}
        if exc.breakdown is not None:
            payload["breakdown"] = dataclasses.asdict(exc.breakdown)
        with open(dump_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
        print(f"training diverged; diagnostic dump at {dump_path}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
