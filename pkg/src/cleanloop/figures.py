"""Matplotlib rendering of experiment reports.

Used by the CLI's report path to drop PNG figures next to the CSV/JSON
outputs: per-seed precision-recall curves with their mean, and the
per-iteration error yield of active runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ExperimentResult


def render_pr_curves(result: ExperimentResult, path: str | Path) -> None:
    """One PR curve per seed plus their pointwise mean."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    curves = []
    for run in result.runs:
        points = np.array(run.report.pr_curve)
        curves.append(points)
        ax.plot(points[:, 0], points[:, 1], alpha=0.45, linewidth=1.0,
                label=f"seed {run.seed} (ap={run.report.ap:.3f})")
    if len(curves) > 1 and all(len(c) == len(curves[0]) for c in curves):
        mean = np.mean(np.stack(curves), axis=0)
        ax.plot(mean[:, 0], mean[:, 1], color="black", linewidth=2.0, label="mean")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{result.method}: precision-recall")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_iteration_yield(result: ExperimentResult, path: str | Path) -> None:
    """Errors found per queried batch, per seed."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for run in result.runs:
        yields = run.report.per_iteration_yield
        if not yields:
            continue
        iterations = [row[0] for row in yields]
        fractions = [row[1] / row[2] for row in yields]
        ax.plot(iterations, fractions, marker="o", markersize=3, alpha=0.7,
                label=f"seed {run.seed}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("batch error fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"{result.method}: per-iteration error yield")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
