"""Frame-wise metrics, per-operation aggregation and ribbon timelines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .corpus import PHASE_NAMES, SHORT_PHASES, TRANSITION
from .losses import DegenerateInputError

STD_NOTE = "std is the population standard deviation over operations (divide by n)"

# phase colours by name, tab10-like hex values
PALETTE = {
    0: "#1f77b4",  # blue
    1: "#ff7f0e",  # orange
    2: "#2ca02c",  # green
    3: "#d62728",  # red
    4: "#8c564b",  # brown
    5: "#e377c2",  # pink
    6: "#7f7f7f",  # grey
    7: "#bcbd22",  # yellow
}
TRANSITION_COLOR = "#d9d9d9"


def _valid(pred, labels, mask):
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = (labels != TRANSITION) if mask is None else np.asarray(mask, dtype=bool)
    if not pred.shape == labels.shape == mask.shape:
        raise ValueError("pred, labels and mask must have equal lengths")
    if not mask.any():
        raise DegenerateInputError("no unmasked frames to score")
    return pred[mask], labels[mask]


def frame_accuracy(pred, labels, mask=None) -> float:
    p, y = _valid(pred, labels, mask)
    return float(np.count_nonzero(p == y)) / y.size


def confusion_matrix(pred, labels, mask=None, num_classes: int = len(PHASE_NAMES)) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p, y = _valid(pred, labels, mask)
    return np.bincount(y * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall, F1 and support per class; zero denominators give 0."""
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, support


def weighted_f1(pred, labels, mask=None, num_classes: int = len(PHASE_NAMES)) -> float:
    """Support-weighted F1, evaluated in exact rationals and rounded once.

    F1_j = 2 tp / (support + predicted) whenever tp > 0, and 0 otherwise.
    """
    cm = confusion_matrix(pred, labels, mask, num_classes)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    total = sum((Fraction(int(s) * 2 * int(t), int(s) + int(p)) for t, s, p in zip(tp, support, predicted) if t),
                Fraction(0))
    return float(total / int(support.sum()))


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    mean = float(v.mean())
    return mean, float(np.sqrt(((v - mean) ** 2).mean()))


def short_phase_recall(cm: np.ndarray, phases: Sequence[int] = SHORT_PHASES) -> float:
    """Macro recall over the given (short-duration) phases."""
    _, recall, _, _ = per_class_prf(cm)
    return float(np.mean(recall[list(phases)]))


@dataclass
class EvalReport:
    op_ids: list[str]
    accuracy: list[float]
    weighted_f1: list[float]
    accuracy_mean: float
    accuracy_std: float
    weighted_f1_mean: float
    weighted_f1_std: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    confusion: list[list[int]]
    short_phase_recall: float
    seed: int | None = None
    note: str = STD_NOTE

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def evaluate_predictions(op_ids: Sequence[str], preds: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                         num_classes: int = len(PHASE_NAMES), seed: int | None = None) -> EvalReport:
    accs, f1s = [], []
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        accs.append(frame_accuracy(p, y))
        f1s.append(weighted_f1(p, y, num_classes=num_classes))
        cm += confusion_matrix(p, y, num_classes=num_classes)
    precision, recall, f1, support = per_class_prf(cm)
    acc_mean, acc_std = aggregate(accs)
    f1_mean, f1_std = aggregate(f1s)
    return EvalReport(
        op_ids=list(op_ids), accuracy=accs, weighted_f1=f1s,
        accuracy_mean=acc_mean, accuracy_std=acc_std,
        weighted_f1_mean=f1_mean, weighted_f1_std=f1_std,
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
        support=[int(s) for s in support], confusion=cm.tolist(),
        short_phase_recall=short_phase_recall(cm), seed=seed,
    )


# ---------------------------------------------------------------------------
# ribbons


def run_segments(seq) -> list[tuple[int, int, int]]:
    """(start, stop, value) for each maximal run of equal values."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return []
    change = np.flatnonzero(seq[1:] != seq[:-1]) + 1
    bounds = np.concatenate([[0], change, [seq.size]])
    return [(int(a), int(b), int(seq[a])) for a, b in zip(bounds[:-1], bounds[1:])]


def ribbon_svg(ops: Sequence[tuple[Sequence[int], Sequence[int]]], palette: dict[int, str] | None = None,
               titles: Sequence[str] | None = None, width: int = 900, ribbon_h: int = 18) -> str:
    """SVG document with ground-truth and predicted ribbons for each operation.

    Each operation occupies two stacked ribbons (truth on top). Transition
    frames in the truth ribbon are drawn in neutral gray.
    """
    palette = palette or PALETTE
    left, gap, title_h = 110, 14, 14
    block_h = title_h + 2 * ribbon_h + gap
    legend_y = 10 + len(ops) * block_h
    height = legend_y + 20 * ((len(PHASE_NAMES) + 3) // 4) + 10
    plot_w = width - left - 10
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect class="background" x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    for i, (pred, labels) in enumerate(ops):
        pred = np.asarray(pred)
        labels = np.asarray(labels)
        if pred.shape != labels.shape:
            raise ValueError(f"operation {i}: prediction and label lengths differ")
        n = max(1, labels.size)
        y0 = 10 + i * block_h
        title = titles[i] if titles else f"operation {i}"
        out.append(f'<text x="4" y="{y0 + 10}" font-family="sans-serif" font-size="11">{escape(title)}</text>')
        for row, (seq, name) in enumerate(((labels, "truth"), (pred, "prediction"))):
            y = y0 + title_h + row * ribbon_h
            out.append(f'<text x="4" y="{y + ribbon_h - 5}" font-family="sans-serif" font-size="10">{name}</text>')
            for a, b, v in run_segments(seq):
                x = left + plot_w * a / n
                w = plot_w * (b - a) / n
                color = palette.get(v, TRANSITION_COLOR) if v != TRANSITION else TRANSITION_COLOR
                out.append(f'<rect class="seg" x="{x:.3f}" y="{y}" width="{w:.3f}" height="{ribbon_h}" '
                           f'fill="{color}"><title>{name} {a}-{b}: {v}</title></rect>')
    for j, name in enumerate(PHASE_NAMES):
        x = 10 + (j % 4) * (width // 4)
        y = legend_y + 20 * (j // 4)
        out.append(f'<rect class="legend" x="{x}" y="{y}" width="12" height="12" fill="{palette[j]}"/>')
        out.append(f'<text x="{x + 16}" y="{y + 10}" font-family="sans-serif" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_ribbon(ops, palette=None, out_path=None, titles=None) -> str:
    svg = ribbon_svg(ops, palette, titles)
    if out_path is not None:
        Path(out_path).write_text(svg, encoding="utf-8")
    return svg
