"""Matplotlib report figures, written next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .decision import CalibrationSlide, Thresholds, assign_classes
from .evaluation import ConfusionMatrix
from .labels import PatchClass, Verdict


def confusion_matrix_figure(cm: ConfusionMatrix, path: str | Path) -> None:
    k = len(cm.classes)
    fig, ax = plt.subplots(figsize=(1.6 + k, 1.4 + k))
    ax.imshow(cm.counts, cmap="Blues")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(cm.counts[i, j]), ha="center", va="center", fontsize=11)
    names = [c.value for c in cm.classes]
    ax.set_xticks(range(k), names, rotation=30, ha="right")
    ax.set_yticks(range(k), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    title = "patch confusion"
    if cm.n_unseen:
        title += f" (coverage {cm.coverage:.2%})"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def calibration_figure(
    slides: Sequence[CalibrationSlide],
    t_p_grid: Sequence[float],
    t_r_grid: Sequence[float],
    chosen: Thresholds,
    path: str | Path,
) -> None:
    """Sensitivity/specificity heatmaps over the threshold grid."""
    t_ps = sorted(t_p_grid)
    t_rs = sorted(t_r_grid)
    sens = np.zeros((len(t_ps), len(t_rs)))
    spec = np.zeros_like(sens)
    truths = [s.truth for s in slides]
    n_mel = sum(1 for t in truths if t is Verdict.MELANOMA)
    n_ben = len(truths) - n_mel
    for i, t_p in enumerate(t_ps):
        rhos = []
        for slide in slides:
            classes = assign_classes(slide.probabilities, t_p)
            m = sum(1 for c in classes if c is PatchClass.MALIGNANT)
            b = sum(1 for c in classes if c is PatchClass.BENIGN)
            rhos.append(m / (m + b) if m + b else None)
        for j, t_r in enumerate(t_rs):
            tp = tn = 0
            for rho, truth in zip(rhos, truths):
                mel = rho is not None and rho >= t_r
                if truth is Verdict.MELANOMA and mel:
                    tp += 1
                if truth is not Verdict.MELANOMA and not mel:
                    tn += 1
            sens[i, j] = tp / n_mel if n_mel else 1.0
            spec[i, j] = tn / n_ben if n_ben else 1.0

    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, grid, name in ((axes[0], sens, "sensitivity"), (axes[1], spec, "specificity")):
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(t_rs)), [f"{t:.2f}" for t in t_rs], rotation=90, fontsize=7)
        ax.set_yticks(range(len(t_ps)), [f"{t:.2f}" for t in t_ps], fontsize=8)
        ax.set_xlabel("ratio threshold")
        ax.set_title(f"slide-level {name}")
        fig.colorbar(im, ax=ax, fraction=0.04)
        if chosen.t_r in t_rs and chosen.t_p in t_ps:
            ax.scatter(
                [t_rs.index(chosen.t_r)], [t_ps.index(chosen.t_p)],
                marker="*", s=160, color="red", edgecolor="white", zorder=3,
            )
    axes[0].set_ylabel("probability threshold")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
