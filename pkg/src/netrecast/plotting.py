"""Figures for cost reports and error-versus-cost comparisons (rendered to files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .costmodel import CostReport  # noqa: E402

# Fixed metadata keeps the PNG bytes stable across runs.
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_block_costs(report: CostReport, path, baseline: CostReport | None = None, title: str = "") -> Path:
    """Per-block multiplications and activation reads, optionally against a baseline."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for ax, attr, label in ((axes[0], "mults", "multiplications"), (axes[1], "act_reads", "activation reads")):
        names = [b.name for b in report.blocks]
        vals = [getattr(b, attr) for b in report.blocks]
        xs = range(len(names))
        if baseline is not None:
            base = [getattr(b, attr) for b in baseline.blocks]
            bx = range(len(base))
            ax.bar([x - 0.2 for x in bx], base, width=0.4, label="baseline", color="#999999")
            ax.bar([x + 0.2 for x in xs], vals, width=0.4, label="recast", color="#3070b0")
            ax.legend(fontsize=8)
        else:
            ax.bar(list(xs), vals, color="#3070b0")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(label)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_error_vs_cost(rows: list[dict], cost_key: str, path, xlabel: str = "") -> Path:
    """One line per run from its baseline point to its recast point.

    ``rows`` carry ``run``, ``stage``, ``val_error`` and the cost column ``cost_key``.
    """
    fig, ax = plt.subplots(figsize=(5.5, 4))
    runs: dict[str, list[dict]] = {}
    for r in rows:
        runs.setdefault(r["run"], []).append(r)
    for run, pts in sorted(runs.items()):
        pts = sorted(pts, key=lambda r: r["stage"] != "baseline")
        xs = [float(p[cost_key]) for p in pts]
        ys = [100.0 * float(p["val_error"]) for p in pts]
        ax.plot(xs, ys, marker="o", label=run)
        for x, y, p in zip(xs, ys, pts):
            ax.annotate(p["stage"], (x, y), fontsize=7, textcoords="offset points", xytext=(3, 3))
    ax.set_xlabel(xlabel or cost_key)
    ax.set_ylabel("validation error (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_metrics(history_rows: list[dict], path, title: str = "") -> Path:
    """Training loss and validation accuracy per epoch."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ep = [int(r["epoch"]) for r in history_rows]
    ax.plot(ep, [float(r["train_loss"]) for r in history_rows], marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [100 * float(r["val_acc"]) for r in history_rows], marker="s", color="#c05020", label="val acc")
    ax2.set_ylabel("validation accuracy (%)")
    if title:
        ax.set_title(title)
    return _save(fig, path)
