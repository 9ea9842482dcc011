"""Synthetic port-catheter operation corpus.

Operations follow the fixed eight-phase workflow with imbalanced phase
durations. Features are emitted directly at one frame per second; each phase
has a class-conditional mean per branch, frames near phase borders blend
towards the neighbouring phase, and a short masked transition band separates
consecutive phases.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .tensor import ParameterError, Tensor

TRANSITION = -1

PHASE_NAMES = (
    "Preparation",
    "Puncture",
    "Guide Wire",
    "Catheter Placement",
    "Catheter Positioning",
    "Catheter Adjustment",
    "Catheter Control",
    "Closing",
)
SHORT_PHASES = (2, 4, 6)
LONG_PHASES = (1, 3, 5)

# Invented defaults: only the qualitative ordering of phase lengths is known.
DEFAULT_DURATIONS = (300.0, 420.0, 60.0, 480.0, 45.0, 360.0, 50.0, 240.0)
DEFAULT_CONFUSABILITY = (0.1, 0.1, 0.9, 0.1, 0.95, 0.1, 0.9, 0.1)
MIN_DURATION = 5


@dataclass
class PhaseSpec:
    phase_id: int
    name: str
    duration_mean: float
    duration_std: float
    audio_mean: np.ndarray
    visual_mean: np.ndarray
    noise: float = 1.0
    confusability: float = 0.0

    def __post_init__(self):
        if self.duration_mean <= 0:
            raise ParameterError(f"{self.name}: duration_mean must be > 0")
        if self.duration_std < 0:
            raise ParameterError(f"{self.name}: duration_std must be >= 0")


@dataclass
class CorpusParams:
    """Everything needed to regenerate a corpus bit for bit."""

    seed: int = 0
    n_ops: int = 25
    audio_dim: int = 32
    audio_channels: int = 3
    visual_dim: int = 32
    durations: list[float] = field(default_factory=lambda: list(DEFAULT_DURATIONS))
    duration_cv: float = 0.25
    confusability: list[float] = field(default_factory=lambda: list(DEFAULT_CONFUSABILITY))
    mean_scale: float = 0.5
    noise: float = 4.0
    session_drift: float = 0.3
    edge_similarity: float = 0.98
    boundary_jitter_s: float = 8.0
    transition_s: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OperationRecord:
    op_id: str
    audio: Tensor
    visual: Tensor
    labels: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.labels != TRANSITION

    @property
    def num_frames(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class CorpusManifest:
    params: dict
    splits: dict[str, list[str]]
    class_counts: dict[str, list[int]]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.params["seed"], "params": self.params, "splits": self.splits,
             "class_counts": self.class_counts},
            indent=2, sort_keys=True,
        ) + "\n"


def hann_window_frames(signal, rate: int, window_s: float = 7.0, hop_s: float = 1.0) -> list[np.ndarray]:
    """Causal Hann-weighted frames, one per hop, each ending at the current hop.

    Frame k (1-based) covers samples [k*hop*rate - L, k*hop*rate); samples
    before the start of the signal are zeros.
    """
    if window_s <= 0 or hop_s <= 0:
        raise ParameterError("window and hop must be positive")
    length = int(round(window_s * rate))
    hop = int(round(hop_s * rate))
    if length < 2 or hop < 1:
        raise ParameterError("window must span at least two samples")
    x = np.asarray(signal, dtype=np.float64)
    w = np.hanning(length)
    padded = np.concatenate([np.zeros(length), x])
    frames = []
    for k in range(1, x.size // hop + 1):
        end = k * hop + length
        frames.append(padded[end - length: end] * w)
    return frames


def make_phase_specs(params: CorpusParams) -> list[PhaseSpec]:
    """Draw per-phase emission means from the corpus seed.

    The first and last phases get nearly identical emissions: the start and
    end of an operation look and sound alike.
    """
    rng = np.random.default_rng([params.seed, 0])
    d_audio = params.audio_channels * params.audio_dim
    specs = []
    for j, name in enumerate(PHASE_NAMES):
        specs.append(PhaseSpec(
            phase_id=j, name=name,
            duration_mean=float(params.durations[j]),
            duration_std=float(params.durations[j]) * params.duration_cv,
            audio_mean=rng.normal(0.0, params.mean_scale, d_audio),
            visual_mean=rng.normal(0.0, params.mean_scale, params.visual_dim),
            noise=params.noise,
            confusability=float(params.confusability[j]),
        ))
    first, last = specs[0], specs[-1]
    rho = params.edge_similarity
    mix = np.sqrt(max(0.0, 1.0 - rho * rho))
    last.audio_mean = rho * first.audio_mean + mix * last.audio_mean
    last.visual_mean = rho * first.visual_mean + mix * last.visual_mean
    return specs


def sample_durations(specs: Sequence[PhaseSpec], rng: np.random.Generator) -> list[int]:
    out = []
    for s in specs:
        d = s.duration_mean if s.duration_std == 0 else rng.normal(s.duration_mean, s.duration_std)
        out.append(max(MIN_DURATION, int(round(d))))
    return out


def generate_operation(specs: Sequence[PhaseSpec], seed, op_id: str = "op000", transition_s: int = 3,
                       session_drift: float = 0.0, boundary_jitter_s: float = 0.0) -> OperationRecord:
    """One operation with labels on the annotated phase grid.

    The emitted features switch phase at borders offset from the annotated
    ones by ``N(0, boundary_jitter_s)`` seconds, modelling annotation
    ambiguity; each offset keeps at least one emitted frame per phase.
    """
    if len(specs) != len(PHASE_NAMES) or [s.phase_id for s in specs] != list(range(len(PHASE_NAMES))):
        raise ParameterError("expected the eight phase specs in canonical order")
    rng = np.random.default_rng(seed)
    durations = sample_durations(specs, rng)
    total = sum(durations)
    starts = np.cumsum([0] + durations[:-1])
    labels = np.repeat(np.arange(len(specs)), durations)

    emit_starts = starts.copy()
    if boundary_jitter_s > 0:
        offsets = np.rint(rng.normal(0.0, boundary_jitter_s, len(starts) - 1)).astype(np.int64)
        for j in range(1, len(starts)):
            lo = emit_starts[j - 1] + 1
            emit_starts[j] = int(np.clip(starts[j] + offsets[j - 1], lo, starts[j] + durations[j] - 1))
    emit_durations = np.diff(np.append(emit_starts, total))
    phase = np.repeat(np.arange(len(specs)), emit_durations)
    starts, durations = emit_starts, [int(d) for d in emit_durations]

    audio_means = np.stack([s.audio_mean for s in specs])
    visual_means = np.stack([s.visual_mean for s in specs])
    noise = np.array([s.noise for s in specs])[phase]

    # blend each frame toward the neighbour on its nearer side
    t = np.arange(total)
    own_start = starts[phase]
    own_end = own_start + np.asarray(durations)[phase]
    to_start = t - own_start
    to_end = own_end - 1 - t
    nearer_prev = to_start <= to_end
    neighbour = np.where(nearer_prev, phase - 1, phase + 1)
    has_neighbour = (neighbour >= 0) & (neighbour < len(specs))
    neighbour = np.clip(neighbour, 0, len(specs) - 1)
    dist = np.minimum(to_start, to_end)
    span = np.asarray(durations, dtype=np.float64)[phase]
    conf = np.array([s.confusability for s in specs])[phase]
    alpha = np.where(has_neighbour, conf * (1.0 - dist / span), 0.0)

    mu_a = (1 - alpha)[:, None] * audio_means[phase] + alpha[:, None] * audio_means[neighbour]
    mu_v = (1 - alpha)[:, None] * visual_means[phase] + alpha[:, None] * visual_means[neighbour]
    drift_a = rng.normal(0.0, session_drift, audio_means.shape[1])
    drift_v = rng.normal(0.0, session_drift, visual_means.shape[1])
    audio = mu_a + drift_a + noise[:, None] * rng.normal(size=mu_a.shape)
    visual = mu_v + drift_v + noise[:, None] * rng.normal(size=mu_v.shape)

    before = transition_s // 2
    for b in np.cumsum(np.bincount(labels, minlength=len(specs)))[:-1]:
        labels[max(0, b - before): b - before + transition_s] = TRANSITION

    return OperationRecord(op_id=op_id, audio=Tensor(audio.T), visual=Tensor(visual.T),
                           labels=labels.astype(np.int64))


def split_ids(ids: Sequence[str], seed: int) -> dict[str, list[str]]:
    """60-20-20 split by operation count, remainders going to train."""
    n = len(ids)
    n_val = n_test = int(0.2 * n)
    order = np.random.default_rng([seed, 1]).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = n - n_val - n_test
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def count_classes(records: Sequence[OperationRecord], num_classes: int = len(PHASE_NAMES)) -> list[int]:
    counts = np.zeros(num_classes, dtype=np.int64)
    for r in records:
        counts += np.bincount(r.labels[r.mask], minlength=num_classes)[:num_classes]
    return [int(c) for c in counts]


def build_corpus(params: CorpusParams) -> tuple[list[OperationRecord], CorpusManifest]:
    specs = make_phase_specs(params)
    records = [
        generate_operation(specs, [params.seed, 2, i], op_id=f"op{i:03d}", transition_s=params.transition_s,
                           session_drift=params.session_drift, boundary_jitter_s=params.boundary_jitter_s)
        for i in range(params.n_ops)
    ]
    splits = split_ids([r.op_id for r in records], params.seed)
    by_id = {r.op_id: r for r in records}
    counts = {k: count_classes([by_id[i] for i in v]) for k, v in splits.items()}
    return records, CorpusManifest(params=params.to_dict(), splits=splits, class_counts=counts)


def write_corpus(records: Sequence[OperationRecord], manifest: CorpusManifest, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for r in records:
        d = root / r.op_id
        d.mkdir(exist_ok=True)
        tc.save_tensor(r.audio, d / "audio.pstn")
        tc.save_tensor(r.visual, d / "visual.pstn")
        (d / "labels.txt").write_text("".join(f"{int(v)}\n" for v in r.labels))
    (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return root


def generate_corpus(n_ops: int = 25, params: CorpusParams | None = None, seed: int | None = None,
                    out_dir=None) -> tuple[list[OperationRecord], CorpusManifest]:
    params = replace(params or CorpusParams(), n_ops=n_ops)
    if seed is not None:
        params = replace(params, seed=seed)
    records, manifest = build_corpus(params)
    if out_dir is not None:
        write_corpus(records, manifest, out_dir)
    return records, manifest


class CorpusFormatError(ValueError):
    pass


def _read_record(d: Path) -> OperationRecord:
    try:
        audio = tc.load_tensor(d / "audio.pstn")
        visual = tc.load_tensor(d / "visual.pstn")
        labels = np.array([int(line) for line in (d / "labels.txt").read_text().split()], dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise CorpusFormatError(f"record {d.name}: {exc}") from exc
    if not (audio.shape[1] == visual.shape[1] == labels.size):
        raise CorpusFormatError(f"record {d.name}: feature/label lengths disagree")
    if np.any((labels < TRANSITION) | (labels >= len(PHASE_NAMES))):
        raise CorpusFormatError(f"record {d.name}: label out of range")
    return OperationRecord(op_id=d.name, audio=audio, visual=visual, labels=labels)


def load_corpus(root) -> tuple[list[OperationRecord], CorpusManifest]:
    root = Path(root)
    try:
        raw = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        manifest = CorpusManifest(params=raw["params"], splits=raw["splits"], class_counts=raw["class_counts"])
    except (OSError, ValueError, KeyError) as exc:
        raise CorpusFormatError(f"manifest.json: {exc}") from exc
    ids = sorted(i for ids in manifest.splits.values() for i in ids)
    records = [_read_record(root / i) for i in ids]
    return records, manifest


def select(records: Sequence[OperationRecord], manifest: CorpusManifest, split: str) -> list[OperationRecord]:
    wanted = set(manifest.splits[split])
    return [r for r in records if r.op_id in wanted]


def records_equal(a: OperationRecord, b: OperationRecord) -> bool:
    return (a.op_id == b.op_id and a.audio.data.tobytes() == b.audio.data.tobytes()
            and a.visual.data.tobytes() == b.visual.data.tobytes() and np.array_equal(a.labels, b.labels))


def corpus_files(root) -> dict[str, bytes]:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

