import numpy as np

from pocapnet import figures
from pocapnet.corpus import CorpusParams, build_corpus
from pocapnet.optim import TraceRow

PNG = b"\x89PNG\r\n\x1a\n"


def test_figures_are_written_and_deterministic(tmp_path, small_corpus_params):
    records, _ = build_corpus(small_corpus_params)
    rows = [TraceRow(e, s, 1.0 / e, 0.5, 0.4 + 0.1 * e) for e in (1, 2, 3) for s in ("train", "val")]
    pairs = [(r.labels.clip(0), r.labels) for r in records[:2]]
    cm = np.eye(8, dtype=int) * 5
    for sub in ("a", "b"):
        d = tmp_path / sub
        figures.plot_phase_durations(records, d / "durations.png")
        figures.plot_trace(rows, d / "trace.png")
        figures.plot_ribbons(pairs, d / "ribbons.png", titles=["x", "y"])
        figures.plot_confusion(cm, d / "confusion.png")
    for name in ("durations.png", "trace.png", "ribbons.png", "confusion.png"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a.startswith(PNG)
        assert a == (tmp_path / "b" / name).read_bytes()


def test_phase_durations_excludes_transition(small_corpus_params):
    records, _ = build_corpus(small_corpus_params)
    d = figures.phase_durations(records)
    assert d.shape == (5, 8)
    assert d.sum() == sum(int(r.mask.sum()) for r in records)
