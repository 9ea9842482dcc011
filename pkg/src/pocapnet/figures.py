"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from .corpus import PHASE_NAMES, TRANSITION, OperationRecord  # noqa: E402
from .evaluate import PALETTE, TRANSITION_COLOR, run_segments  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# keep PNG bytes free of version stamps
PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=PNG_META)
    plt.close(fig)
    return path


def phase_durations(records: Sequence[OperationRecord]) -> np.ndarray:
    """Annotated seconds per phase (transition frames excluded), ops x phases."""
    return np.array([np.bincount(r.labels[r.labels != TRANSITION], minlength=len(PHASE_NAMES)) for r in records])


def plot_phase_durations(records: Sequence[OperationRecord], path):
    """Gaussian density of each phase duration with its cumulative mean onset."""
    durations = phase_durations(records)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(7, 3))
        grid = np.linspace(0, durations.sum(axis=1).max() * 1.05, 600)
        offset = 0.0
        for j, name in enumerate(PHASE_NAMES):
            d = durations[:, j].astype(float)
            color = PALETTE[j]
            if d.size > 1 and d.std() > 0:
                density = gaussian_kde(d)(grid - offset)
                ax.fill_between(grid, density, alpha=0.35, color=color, label=name, linewidth=0)
            offset += d.mean()
            ax.axvline(offset, color=color, linestyle="--", linewidth=1)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("density")
        ax.legend(ncol=4, frameon=False, loc="upper center", bbox_to_anchor=(0.5, 1.25))
        return _save(fig, path)


def plot_trace(rows, path):
    """Loss and weighted F1 per epoch for each split found in the trace."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(7, 2.6))
        for split in sorted({r.split for r in rows}):
            sel = [r for r in rows if r.split == split]
            epochs = [r.epoch for r in sel]
            ax_loss.plot(epochs, [r.loss for r in sel], marker="o", markersize=2, label=split)
            ax_f1.plot(epochs, [r.weighted_f1 for r in sel], marker="o", markersize=2, label=split)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_f1.set_xlabel("epoch")
        ax_f1.set_ylabel("weighted F1")
        ax_f1.set_ylim(0, 1)
        ax_f1.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_ribbons(ops, path, titles=None):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(ops), 1, figsize=(8, 0.8 * len(ops) + 0.6), squeeze=False)
        for i, (pred, labels) in enumerate(ops):
            ax = axes[i, 0]
            for row, seq in enumerate((labels, pred)):
                for a, b, v in run_segments(seq):
                    color = TRANSITION_COLOR if v == TRANSITION else PALETTE.get(v, TRANSITION_COLOR)
                    ax.broken_barh([(a, b - a)], (1 - row, 0.9), facecolors=color)
            ax.set_xlim(0, len(labels))
            ax.set_yticks([0.45, 1.45], ["pred", "truth"])
            ax.set_title(titles[i] if titles else f"operation {i}", loc="left")
            for side in ("left", "bottom"):
                ax.spines[side].set_visible(False)
        handles = [Patch(color=PALETTE[j], label=n) for j, n in enumerate(PHASE_NAMES)]
        fig.legend(handles=handles, ncol=4, frameon=False, loc="lower center", bbox_to_anchor=(0.5, -0.08))
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(cm, path):
    cm = np.asarray(cm, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.8))
        im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
        ax.set_xticks(range(len(PHASE_NAMES)), [n.split()[-1] for n in PHASE_NAMES], rotation=60, ha="right")
        ax.set_yticks(range(len(PHASE_NAMES)), PHASE_NAMES)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(norm.shape[0]):
            for j in range(norm.shape[1]):
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=6,
                        color="white" if norm[i, j] > 0.5 else "black")
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)
