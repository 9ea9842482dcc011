"""Adam, chronological mini-batching and the training loop."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as tc
from .corpus import OperationRecord, count_classes
from .evaluate import aggregate, frame_accuracy, weighted_f1
from .losses import LossKind, LossSpec, multistage_loss
from .model import Model, TemporalMode, receptive_field, run_batch, update_delayed_memory
from .tensor import ParameterError, Tensor

log = logging.getLogger(__name__)

PUBLISHED_LEARNING_RATE = 9e-6
DESK_LEARNING_RATE = 1e-3


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite during training."""


@dataclass
class TrainConfig:
    learning_rate: float = DESK_LEARNING_RATE
    weight_decay: float = 1e-6
    batch_size: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossSpec(**self.loss)
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["kind"] = self.loss.kind.value
        return d


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> AdamState:
    """One Adam update with coupled L2 decay (decay * param added to the gradient)."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    return state


@dataclass(frozen=True)
class Batch:
    op_index: int
    start: int
    stop: int


def batch_schedule(ops: Sequence[OperationRecord], batch_size: int,
                   rng: np.random.Generator | None = None) -> list[Batch]:
    """Contiguous spans, chronological within each operation.

    With ``rng`` the operation order is shuffled; spans of one operation are
    always emitted consecutively and in time order, last partial span kept.
    """
    order = np.arange(len(ops)) if rng is None else rng.permutation(len(ops))
    out = []
    for i in order:
        n = ops[i].num_frames
        for start in range(0, n, batch_size):
            out.append(Batch(int(i), start, min(start + batch_size, n)))
    return out


def _slice(op: OperationRecord, b: Batch):
    return (Tensor(op.audio.data[:, b.start:b.stop]), Tensor(op.visual.data[:, b.start:b.stop]),
            op.labels[b.start:b.stop])


def predict_operation(model: Model, op: OperationRecord, batch_size: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Final-stage predictions for a whole operation, run online batch by batch.

    Returns the predicted ids and the per-batch final-stage logits.
    """
    model.reset_memory()
    preds, logits_all = [], []
    for b in batch_schedule([op], batch_size):
        audio, visual, _ = _slice(op, b)
        outs = run_batch(model, audio, visual, start_pos=b.start, train=False)
        final = outs[-1].data
        logits_all.append(final)
        preds.append(final.argmax(axis=0))
        if model.config.temporal_mode is TemporalMode.DELAYED:
            update_delayed_memory(tc.softmax_cols(Tensor(final)), model)
    model.reset_memory()
    return np.concatenate(preds), logits_all


def evaluate_split(model: Model, ops: Sequence[OperationRecord], cfg: TrainConfig) -> dict:
    accs, f1s, losses = [], [], []
    for op in ops:
        pred, logits = predict_operation(model, op, cfg.batch_size)
        accs.append(frame_accuracy(pred, op.labels))
        f1s.append(weighted_f1(pred, op.labels, num_classes=model.config.num_classes))
        full = Tensor(np.concatenate(logits, axis=1))
        losses.append(multistage_loss([full], op.labels, op.mask, cfg.loss).item())
    return {"loss": float(np.mean(losses)), "accuracy": aggregate(accs)[0], "weighted_f1": aggregate(f1s)[0]}


@dataclass
class TraceRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    weighted_f1: float


TRACE_HEADER = "epoch,split,loss,accuracy,weighted_f1"


def trace_csv(rows: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    buf.write(TRACE_HEADER + "\n")
    for r in rows:
        buf.write(f"{r.epoch},{r.split},{r.loss!r},{r.accuracy!r},{r.weighted_f1!r}\n")
    return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    trace: list[TraceRow]
    best_epoch: int


def resolve_loss(spec: LossSpec, train_ops: Sequence[OperationRecord], num_classes: int) -> LossSpec:
    """Fill class counts from the training split when the loss needs them."""
    if spec.kind in (LossKind.WEIGHTED_CE, LossKind.LDAM) and not spec.class_counts:
        counts = count_classes(train_ops, num_classes)
        # classes absent from training still need a finite weight
        spec = LossSpec(**{**asdict(spec), "class_counts": [max(1, c) for c in counts]})
    return spec


def train(model: Model, train_ops: Sequence[OperationRecord], cfg: TrainConfig,
          val_ops: Sequence[OperationRecord] = ()) -> TrainResult:
    """Train in place and return the best-validation copy with the epoch trace.

    Without validation operations the final model is kept.
    """
    if cfg.epochs == 0:
        return TrainResult(model=model, trace=[], best_epoch=0)
    if cfg.batch_size < receptive_field(model.config):
        log.warning("batch size %d is below the receptive field %d", cfg.batch_size, receptive_field(model.config))
    cfg = replace(cfg, loss=resolve_loss(cfg.loss, train_ops, model.config.num_classes))
    rng = np.random.default_rng([cfg.seed, 7])
    state = AdamState()
    params = model.parameters
    delayed = model.config.temporal_mode is TemporalMode.DELAYED
    trace: list[TraceRow] = []
    best, best_score, best_epoch = None, -math.inf, 0

    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        seen: dict[int, list[np.ndarray]] = {}
        for b in batch_schedule(train_ops, cfg.batch_size, rng):
            op = train_ops[b.op_index]
            if b.start == 0:
                model.reset_memory()
            audio, visual, labels = _slice(op, b)
            mask = labels != -1
            outs = run_batch(model, audio, visual, start_pos=b.start, train=True, rng=rng)
            if delayed:
                update_delayed_memory(tc.softmax_cols(outs[-1].detach()), model)
            seen.setdefault(b.op_index, []).append(outs[-1].data.argmax(axis=0))
            if not mask.any():
                continue
            loss = multistage_loss(outs, labels, mask, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, operation {op.op_id}, frames {b.start}-{b.stop}")
            model.zero_grad()
            tc.backward(loss)
            adam_step(params, state, cfg)
            n = int(mask.sum())
            losses.append(value)
            weights.append(n)
        model.reset_memory()
        train_loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        accs, f1s = [], []
        for i, chunks in seen.items():
            labels = train_ops[i].labels[: sum(c.size for c in chunks)]
            pred = np.concatenate(chunks)
            if (labels != -1).any():
                accs.append(frame_accuracy(pred, labels))
                f1s.append(weighted_f1(pred, labels, num_classes=model.config.num_classes))
        train_acc = aggregate(accs)[0] if accs else float("nan")
        train_f1 = aggregate(f1s)[0] if f1s else float("nan")
        trace.append(TraceRow(epoch, "train", train_loss, train_acc, train_f1))
        if val_ops:
            m = evaluate_split(model, val_ops, cfg)
            trace.append(TraceRow(epoch, "val", m["loss"], m["accuracy"], m["weighted_f1"]))
            if m["weighted_f1"] > best_score:
                best, best_score, best_epoch = model.copy(), m["weighted_f1"], epoch
        log.info("epoch %d loss %.4f acc %.4f", epoch, train_loss, train_acc)

    if best is None:
        best, best_epoch = model.copy(), cfg.epochs
    return TrainResult(model=best, trace=trace, best_epoch=best_epoch)
