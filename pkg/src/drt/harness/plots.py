"""Figure rendering for CLI reports (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_degradation(report, path) -> Path:
    """Grouped bars of oracle-minus-model accuracy per source domain."""
    x = np.arange(len(report.domains))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(x - 0.2, report.static_gap, 0.4, label="static")
    ax.bar(x + 0.2, report.dynamic_gap, 0.4, label=report.dynamic_mode)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x, report.domains)
    ax.set_ylabel("oracle - model accuracy")
    ax.legend()
    return _save(fig, path)


def plot_training_curves(history, path, title: Optional[str] = None) -> Path:
    epochs = [r.epoch for r in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.plot(epochs, [r.lce for r in history], label="lce")
    a1.plot(epochs, [r.ld for r in history], label="ld")
    a1.set_xlabel("epoch")
    a1.legend()
    a2.plot(epochs, [r.target_acc for r in history], label="target", linewidth=2)
    if history:
        for i in range(len(history[0].per_source_acc)):
            a2.plot(epochs, [r.per_source_acc[i] for r in history], label=f"src {i}", alpha=0.7)
    a2.set_ylim(0, 1)
    a2.set_xlabel("epoch")
    a2.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_coefficients(values: np.ndarray, tags: Sequence[int], path) -> Path:
    """First two principal components of the coefficient vectors, coloured by domain."""
    values = np.asarray(values, dtype=np.float64)
    centred = values - values.mean(axis=0)
    if centred.shape[1] >= 2:
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        xy = centred @ vt[:2].T
    else:
        xy = np.column_stack([centred[:, 0], np.zeros(len(centred))])
    tags = np.asarray(tags)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for t in np.unique(tags):
        m = tags == t
        ax.scatter(xy[m, 0], xy[m, 1], s=6, label="untagged" if t < 0 else f"domain {t}")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=7, markerscale=2)
    return _save(fig, path)
