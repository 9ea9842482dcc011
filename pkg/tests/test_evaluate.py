import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pocapnet.corpus import TRANSITION
from pocapnet.evaluate import (PALETTE, TRANSITION_COLOR, EvalReport, aggregate, confusion_matrix,
                               evaluate_predictions, frame_accuracy, render_ribbon, run_segments,
                               short_phase_recall, weighted_f1)
from pocapnet.losses import DegenerateInputError

from oracles import brute_confusion, brute_weighted_f1

SVG = "{http://www.w3.org/2000/svg}"


def random_instance(rng, t=200, c=8):
    labels = rng.integers(0, c, t)
    labels[rng.random(t) < 0.1] = TRANSITION
    pred = np.where(rng.random(t) < 0.6, np.maximum(labels, 0), rng.integers(0, c, t))
    return pred, labels


def test_accuracy_examples():
    assert frame_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert frame_accuracy([0, 1, 1, 1, 5], [0, 1, 1, 2, TRANSITION]) == 0.75


def test_masked_prediction_never_matters():
    a = frame_accuracy([0, 1, 1, 1, 5], [0, 1, 1, 2, TRANSITION])
    b = frame_accuracy([0, 1, 1, 1, 0], [0, 1, 1, 2, TRANSITION])
    assert a == b


def test_all_masked_is_degenerate():
    with pytest.raises(DegenerateInputError):
        frame_accuracy([0, 0], [TRANSITION, TRANSITION])


def test_weighted_f1_examples():
    assert weighted_f1([3] * 10, [3] * 10) == 1.0
    # class 2 never appears in labels: its support weight is zero
    assert weighted_f1([0, 0, 1, 2], [0, 0, 1, 1], num_classes=3) == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-15)


def test_aggregate_examples():
    assert aggregate([0.42]) == (0.42, 0.0)
    mean, std = aggregate([0.6, 0.8])
    assert mean == pytest.approx(0.7, abs=1e-15) and std == pytest.approx(0.1, abs=1e-15)


def test_aggregate_brute_force(rng):
    v = rng.random(10)
    mean = sum(v) / 10
    std = (sum((x - mean) ** 2 for x in v) / 10) ** 0.5
    m, s = aggregate(v)
    assert m == pytest.approx(mean, abs=1e-15) and s == pytest.approx(std, abs=1e-15)


def test_metric_oracles_100_instances(rng):
    for _ in range(100):
        pred, labels = random_instance(rng)
        mask = labels != TRANSITION
        cm = confusion_matrix(pred, labels)
        assert cm.tolist() == brute_confusion(pred, labels, mask, 8)
        n_valid = int(mask.sum())
        assert frame_accuracy(pred, labels) == sum(int(p == y) for p, y, m in zip(pred, labels, mask) if m) / n_valid
        assert frame_accuracy(pred, labels) == np.trace(cm) / cm.sum()
        assert weighted_f1(pred, labels) == brute_weighted_f1(pred, labels, mask, 8)


def test_weighted_f1_matches_sklearn(rng):
    metrics = pytest.importorskip("sklearn.metrics")
    for _ in range(20):
        pred, labels = random_instance(rng)
        m = labels != TRANSITION
        ref = metrics.f1_score(labels[m], pred[m], average="weighted", labels=list(range(8)), zero_division=0)
        assert weighted_f1(pred, labels) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=60), st.integers(0, 1000))
def test_report_invariants(labels, seed):
    rng = np.random.default_rng(seed)
    labels = np.array(labels)
    pred = rng.integers(0, 8, labels.size)
    rep = evaluate_predictions(["a"], [pred], [labels])
    cm = np.array(rep.confusion)
    assert cm.sum(axis=1).tolist() == rep.support
    for v in rep.precision + rep.recall + rep.f1 + rep.accuracy + rep.weighted_f1:
        assert 0.0 <= v <= 1.0
    perfect = evaluate_predictions(["a"], [labels], [labels])
    assert perfect.weighted_f1_mean == perfect.accuracy_mean == 1.0


def test_short_phase_recall():
    cm = np.zeros((8, 8), dtype=int)
    cm[2, 2], cm[2, 0] = 1, 1
    cm[4, 4] = 3
    cm[6, 5] = 2
    assert short_phase_recall(cm) == pytest.approx((0.5 + 1.0 + 0.0) / 3, abs=1e-15)


def test_report_json_round_trip(rng):
    pred, labels = random_instance(rng)
    rep = evaluate_predictions(["op1", "op2"], [pred, pred[::-1]], [labels, labels[::-1]], seed=7)
    back = EvalReport.from_json(rep.to_json())
    assert back == rep and "population" in back.note


def rle_count(seq):
    return sum(1 for i in range(len(seq)) if i == 0 or seq[i] != seq[i - 1])


def seg_rects(svg):
    root = ET.fromstring(svg.encode("utf-8"))
    return [r for r in root.iter(SVG + "rect") if r.get("class") == "seg"]


def test_single_phase_one_rect_per_ribbon():
    rects = seg_rects(render_ribbon([([5] * 30, [5] * 30)]))
    assert len(rects) == 2
    assert {r.get("fill") for r in rects} == {PALETTE[5]}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(-1, 7), min_size=1, max_size=80), min_size=1, max_size=4), st.integers(0, 99))
def test_ribbon_rect_count_matches_rle(label_lists, seed):
    rng = np.random.default_rng(seed)
    ops = [(rng.integers(0, 8, len(y)), np.array(y)) for y in label_lists]
    svg = render_ribbon(ops)
    assert len(seg_rects(svg)) == sum(rle_count(list(p)) + rle_count(list(y)) for p, y in ops)
    assert svg == render_ribbon(ops)


def test_ribbon_boundaries_at_label_changes():
    labels = np.array([0] * 10 + [TRANSITION] * 3 + [1] * 7)
    assert run_segments(labels) == [(0, 10, 0), (10, 13, TRANSITION), (13, 20, 1)]
    rects = seg_rects(render_ribbon([(labels, labels)]))
    assert [r.get("fill") for r in rects[:3]] == [PALETTE[0], TRANSITION_COLOR, PALETTE[1]]


def test_ribbon_file_bytes_deterministic(tmp_path, rng):
    pred, labels = random_instance(rng)
    render_ribbon([(pred, labels)], out_path=tmp_path / "a.svg", titles=["op & 1"])
    render_ribbon([(pred, labels)], out_path=tmp_path / "b.svg", titles=["op & 1"])
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    ET.parse(tmp_path / "a.svg")


def test_ribbon_legend_lists_eight_phases():
    root = ET.fromstring(render_ribbon([([0], [0])]))
    legend = [r for r in root.iter(SVG + "rect") if r.get("class") == "legend"]
    assert [r.get("fill") for r in legend] == [PALETTE[j] for j in range(8)]


def test_ribbon_length_mismatch():
    with pytest.raises(ValueError):
        render_ribbon([([0, 1], [0])])
