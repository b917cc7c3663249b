"""Render metrics logs into PNG figures.

The jsonl log mixes record kinds, told apart by their keys: per-iteration
training records carry loss components, eval records carry miou at an
iteration, sweep records carry a tau without an iteration, and per-image
records carry an image_index. Malformed lines are counted and skipped.
"""

from __future__ import annotations

import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

log = logging.getLogger(__name__)

LOSS_KEYS = ("l_s", "l_st", "l_hts", "l_pro", "l_pixel", "total")


def read_metrics(path: str) -> tuple[list[dict], int]:
    """Parse a jsonl log; returns (records, number of malformed lines)."""
    records: list[dict] = []
    bad = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                records.append(rec)
            except ValueError:
                bad += 1
    if bad:
        log.warning("skipped %d malformed metrics lines in %s", bad, path)
    return records, bad


def _save(fig: "plt.Figure", path: str, written: list[str]) -> None:
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)


def emit_plots(metrics_log_path: str, out_dir: str) -> list[str]:
    """Write every figure supported by the log's contents; returns file paths."""
    records, _ = read_metrics(metrics_log_path)
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []

    train_recs = [r for r in records if "iter" in r and "l_s" in r]
    eval_recs = [r for r in records if "iter" in r and "miou" in r]
    sweep_recs = [r for r in records if "tau" in r and "miou" in r and "iter" not in r]
    image_recs = [r for r in records if "image_index" in r and "boundary_error_fraction" in r]

    if train_recs:
        fig, ax = plt.subplots(figsize=(7, 4.2))
        iters = [r["iter"] for r in train_recs]
        for key in LOSS_KEYS:
            ax.plot(iters, [r.get(key, 0.0) for r in train_recs], label=key, linewidth=1.0)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_title("training loss components")
        ax.legend(fontsize=8, ncol=3)
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, "loss_curves.png"), written)

    if eval_recs:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([r["iter"] for r in eval_recs], [r["miou"] for r in eval_recs], marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel("target mIoU")
        ax.set_ylim(0.0, 1.0)
        ax.set_title("held-out target mIoU")
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, "miou_curve.png"), written)

    if sweep_recs:
        taus = sorted({float(r["tau"]) for r in sweep_recs})
        means = []
        for t in taus:
            vals = [r["miou"] for r in sweep_recs if float(r["tau"]) == t]
            means.append(sum(vals) / len(vals))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(taus)), means, width=0.6, color="#4878a8")
        ax.set_xticks(range(len(taus)), [f"{t:g}" for t in taus])
        ax.set_xlabel("confidence threshold tau")
        ax.set_ylabel("target mIoU")
        ax.set_title("threshold sweep")
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, "tau_sweep.png"), written)

    if image_recs:
        fig, ax = plt.subplots(figsize=(6, 4))
        fractions = [r["boundary_error_fraction"] for r in image_recs if r["boundary_error_fraction"] is not None]
        ax.hist(fractions, bins=20, range=(0.0, 1.0), color="#a85048")
        ax.set_xlabel("fraction of errors near a class boundary")
        ax.set_ylabel("eval scenes")
        ax.set_title("boundary-error concentration")
        fig.tight_layout()
        _save(fig, os.path.join(out_dir, "boundary_error_hist.png"), written)

    if not written:
        log.warning("no plottable records in %s", metrics_log_path)
    return written
