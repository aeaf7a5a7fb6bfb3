"""Matplotlib figures written next to the CLI's delimited outputs.

Every function renders to a file with the non-interactive Agg backend
and returns the path it wrote.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def learning_curves(curves: dict, path, ylabel: str = "train loss") -> Path:
    """One line per named run; ``curves[name] = (epochs, values)``.

    A run whose values are 2-D (repeats x epochs) is drawn as its mean
    with a one-standard-deviation band.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (x, y) in curves.items():
        y = np.asarray(y, dtype=float)
        if y.ndim == 2:
            mean, sd = y.mean(axis=0), y.std(axis=0)
            ax.plot(x, mean, label=name)
            ax.fill_between(x, mean - sd, mean + sd, alpha=0.25)
        else:
            ax.plot(x, y, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save(fig, path)


def ablation_curve(lambda_d: Sequence[float], scores: Sequence[float], path,
                   errors: Optional[Sequence[float]] = None, ylabel: str = "test ROC AUC") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(lambda_d, scores, yerr=errors, marker="o", capsize=3)
    ax.set_xlabel(r"$\lambda_d$")
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def attention_heatmap(matrix: np.ndarray, labels: Sequence[str], path, title: str = "") -> Path:
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(0.35 * len(labels) + 2, 0.35 * len(labels) + 1.5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, fontsize=7, rotation=90)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def head_stats_bars(stats: Sequence, path) -> Path:
    """Grouped bars of mean column score for matched vs other atoms per head."""
    names = [f"L{s.layer}H{s.head}\n{s.pattern}" for s in stats]
    x = np.arange(len(stats))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(stats) + 2), 4))
    ax.bar(x - 0.2, [s.mu_plus for s in stats], 0.4, yerr=[s.sigma_plus for s in stats],
           label="matched", capsize=2)
    ax.bar(x + 0.2, [s.mu_minus for s in stats], 0.4, yerr=[s.sigma_minus for s in stats],
           label="other", capsize=2)
    ax.set_xticks(x, names, fontsize=7)
    ax.set_ylabel("mean column attention")
    ax.legend()
    return _save(fig, path)
