"""Frame-level classification losses with transition masking.

All losses take logits of shape C x T, integer labels of length T and a
boolean mask of length T. Masked frames add nothing to the value or the
gradient, and the value is averaged over the unmasked frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as tc
from .tensor import ParameterError, Tensor


class DegenerateInputError(ValueError):
    """No frame is left to average over."""


class LossKind(str, Enum):
    CE = "ce"
    WEIGHTED_CE = "weighted_ce"
    FOCAL = "focal"
    LDAM = "ldam"


@dataclass
class LossSpec:
    kind: LossKind = LossKind.WEIGHTED_CE
    gamma: float = 2.0
    ldam_c: float = 1.0
    ldam_s: float = 30.0
    ldam_max_margin: float | None = 0.5
    ldam_reweight: bool = True
    class_counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.kind = LossKind(self.kind)
        if self.gamma < 0:
            raise ParameterError("gamma must be >= 0")
        if self.ldam_c < 0:
            raise ParameterError("ldam_c must be >= 0")
        if self.ldam_s <= 0:
            raise ParameterError("ldam_s must be > 0")
        if self.kind in (LossKind.WEIGHTED_CE, LossKind.LDAM) and self.class_counts:
            if min(self.class_counts) < 1:
                raise ParameterError("class counts must all be >= 1")


def class_weights(class_counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights normalized as N / (K * n_j)."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ParameterError(f"class counts must all be >= 1, got {list(class_counts)}")
    return counts.sum() / (counts.size * counts)


def ldam_margins(class_counts: Sequence[int], ldam_c: float = 1.0, max_margin: float | None = 0.5) -> np.ndarray:
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts < 1):
        raise ParameterError(f"class counts must all be >= 1, got {list(class_counts)}")
    margins = ldam_c / counts ** 0.25
    if max_margin is not None and ldam_c > 0:
        margins = margins * (max_margin / margins.max())
    return margins


def _prepare(logits: Tensor, labels, mask):
    z = logits.data
    if z.ndim != 2:
        raise tc.DimensionError(f"logits must be [C, T], got {list(logits.shape)}")
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones(z.shape[1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if labels.shape != (z.shape[1],) or mask.shape != (z.shape[1],):
        raise tc.DimensionError("labels and mask must have one entry per frame")
    if not mask.any():
        raise DegenerateInputError("every frame is masked")
    idx = np.flatnonzero(mask)
    y = labels[idx]
    if np.any((y < 0) | (y >= z.shape[0])):
        raise ParameterError(f"unmasked labels must lie in [0, {z.shape[0]})")
    return z, idx, y


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def _nll(logits: Tensor, labels, mask, weights=None, logit_scale: float = 1.0, margins=None) -> Tensor:
    z, idx, y = _prepare(logits, labels, mask)
    zs = z[:, idx].copy()
    cols = np.arange(idx.size)
    if margins is not None:
        zs[y, cols] -= margins[y]
    zs *= logit_scale
    logp = _log_softmax(zs)
    w = np.ones(idx.size) if weights is None else np.asarray(weights, dtype=np.float64)[y]
    n = idx.size
    value = -(w * logp[y, cols]).sum() / n

    def _backward(g):
        p = np.exp(logp)
        p[y, cols] -= 1.0
        full = np.zeros_like(z)
        full[:, idx] = p * (w * logit_scale / n)
        logits.accumulate(g * full)

    return tc._node(np.array(value), (logits,), "nll", _backward)


def cross_entropy(logits: Tensor, labels, mask=None, weights=None) -> Tensor:
    return _nll(logits, labels, mask, weights=weights)


def focal_loss(logits: Tensor, labels, mask=None, gamma: float = 2.0) -> Tensor:
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    z, idx, y = _prepare(logits, labels, mask)
    cols = np.arange(idx.size)
    logp_all = _log_softmax(z[:, idx])
    logp = logp_all[y, cols]
    pt = np.exp(logp)
    one_minus = 1.0 - pt
    n = idx.size
    value = -(one_minus ** gamma * logp).sum() / n

    def _backward(g):
        # dL/dz_j = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (onehot_j - p_j)
        if gamma == 0:
            coef = -np.ones_like(pt)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                lead = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * pt * logp, 0.0)
            coef = lead - one_minus ** gamma
        d = -np.exp(logp_all)
        d[y, cols] += 1.0
        full = np.zeros_like(z)
        full[:, idx] = d * (coef / n)
        logits.accumulate(g * full)

    return tc._node(np.array(value), (logits,), "focal", _backward)


def ldam_loss(logits: Tensor, labels, mask=None, class_counts=(), ldam_c: float = 1.0,
              ldam_s: float = 30.0, max_margin: float | None = 0.5, weights=None) -> Tensor:
    """Cross-entropy on ``s * (logits - margin_y * onehot_y)``, margins ~ n_j^(-1/4).

    ``weights`` optionally re-weights frames by class, as in the re-weighted
    LDAM variant.
    """
    margins = ldam_margins(class_counts, ldam_c, max_margin)
    if margins.size != logits.shape[0]:
        raise tc.DimensionError(f"{margins.size} class counts for {logits.shape[0]} classes")
    return _nll(logits, labels, mask, weights=weights, logit_scale=ldam_s, margins=margins)


def loss_fn(logits: Tensor, labels, mask, spec: LossSpec) -> Tensor:
    if spec.kind is LossKind.CE:
        return cross_entropy(logits, labels, mask)
    if spec.kind is LossKind.WEIGHTED_CE:
        return cross_entropy(logits, labels, mask, weights=class_weights(spec.class_counts))
    if spec.kind is LossKind.FOCAL:
        return focal_loss(logits, labels, mask, spec.gamma)
    weights = class_weights(spec.class_counts) if spec.ldam_reweight else None
    return ldam_loss(logits, labels, mask, spec.class_counts, spec.ldam_c, spec.ldam_s, spec.ldam_max_margin, weights)


def multistage_loss(per_stage_logits: list[Tensor], labels, mask, spec: LossSpec) -> Tensor:
    if not per_stage_logits:
        raise ParameterError("need at least one stage output")
    total = loss_fn(per_stage_logits[0], labels, mask, spec)
    for logits in per_stage_logits[1:]:
        total = tc.add(total, loss_fn(logits, labels, mask, spec))
    return total
