"""Matplotlib figures emitted next to the report's CSV/markdown tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_summary_bars(rows: list[dict], out_path: str | Path) -> Path:
    """Grouped bars of mean±std per variant, one group per (task, perturbation)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    groups = sorted({(r["task"], r["perturbation"]) for r in rows})
    variants = sorted({r["variant"] for r in rows})
    width = 0.8 / max(len(variants), 1)

    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(groups), 3.2))
    for vi, variant in enumerate(variants):
        xs, means, stds = [], [], []
        for gi, group in enumerate(groups):
            match = [r for r in rows if (r["task"], r["perturbation"]) == group and r["variant"] == variant]
            if not match:
                continue
            xs.append(gi + vi * width)
            means.append(match[0]["mean"])
            stds.append(match[0]["std"])
        ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=variant)
    ax.set_xticks([gi + 0.4 - width / 2 for gi in range(len(groups))])
    ax.set_xticklabels([f"{t}\n{p}" for t, p in groups], fontsize=8)
    ax.set_ylabel("success rate / return")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_learning_curves(curves: dict[str, list[tuple[int, float]]], out_path: str | Path) -> Path:
    """Eval score vs environment step, one line per (variant, seed)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, points in sorted(curves.items()):
        pts = sorted(points)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("eval score")
    if curves:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
