"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_log(log_path, out_path):
    """Loss terms on top, consistency weights and learning rate below."""
    with open(log_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return None
    t = np.array([int(r["t"]) for r in rows])
    col = {k: np.array([float(r[k]) for r in rows]) for k in ("l_sup", "l_con", "l_sam", "total", "lambda_c", "lambda_s", "lr")}
    skipped = np.array([int(r["sam_skipped"]) for r in rows], dtype=bool)

    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax0.plot(t, col["total"], lw=1.2, label="total")
    ax0.plot(t, col["l_sup"], lw=0.8, label="supervised")
    ax0.plot(t, col["l_con"], lw=0.8, label="teacher consistency")
    sam = np.where(skipped, np.nan, col["l_sam"])
    if np.isfinite(sam).any():
        ax0.plot(t, sam, lw=0.8, label="oracle consistency")
    ax0.set_yscale("log")
    ax0.set_ylabel("loss")
    ax0.legend(frameon=False, fontsize=8)

    ax1.plot(t, col["lambda_c"], label=r"$\lambda_c$ (ramp-up)")
    ax1.plot(t, col["lambda_s"], label=r"$\lambda_s$ (ramp-down)")
    ax1.set_ylabel("weight")
    ax1.set_xlabel("iteration")
    ax2 = ax1.twinx()
    ax2.step(t, col["lr"], where="post", color="0.5", ls="--", lw=0.8, label="learning rate")
    ax2.set_yscale("log")
    ax2.set_ylabel("learning rate")
    ax1.legend(frameon=False, fontsize=8, loc="center left")
    return _save(fig, out_path)


def plot_metrics(report: MetricsReport, out_path, title: str = ""):
    """Per-case Dice and 95HD bars; sentinel distances are hatched."""
    ids = [c.case_id for c in report.cases]
    x = np.arange(len(ids))
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(max(6, 0.5 * len(ids) + 4), 3.2))
    ax0.bar(x, [c.dice for c in report.cases], color="C0")
    ax0.set_ylim(0, 100)
    ax0.set_ylabel("Dice [%]")
    bars = ax1.bar(x, [c.hd95 for c in report.cases], color="C3")
    for bar, c in zip(bars, report.cases):
        if c.sentinel:
            bar.set_hatch("//")
            bar.set_alpha(0.5)
    ax1.set_ylabel(f"95HD [{report.unit}]")
    for ax in (ax0, ax1):
        ax.set_xticks(x)
        ax.set_xticklabels(ids, rotation=90, fontsize=7)
    if title:
        fig.suptitle(title)
    return _save(fig, out_path)


def plot_comparison(results: dict, out_path, metric: str = "dice"):
    """Mean and spread of one metric per method, e.g. across seeds."""
    names = list(results)
    values = [np.asarray(results[n], dtype=float) for n in names]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3))
    ax.bar(range(len(names)), [v.mean() for v in values], yerr=[v.std() for v in values], color="C0", capsize=3)
    for i, v in enumerate(values):
        ax.plot(np.full(len(v), i), v, "k.", ms=4)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names)
    ax.set_ylabel(metric)
    return _save(fig, out_path)
