import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mres_seg.metrics import (
    SWEEP_THRESHOLDS,
    ConfusionAccumulator,
    MetricReport,
    argmax_iou,
    auc,
    confusion_counts,
    confusion_metrics,
    metrics_from_counts,
    pr_crossing,
    report_from_counts,
    threshold_sweep,
)


def brute_counts(labels, scores, cls, t, valid):
    tp = fp = fn = tn = 0
    for y, s, v in zip(labels.ravel(), scores.ravel(), valid.ravel()):
        if not v:
            continue
        p, pos = s >= t, y == cls
        tp += p and pos
        fp += p and not pos
        fn += (not p) and pos
        tn += (not p) and not pos
    return tp, fp, fn, tn


def test_sweep_grid():
    assert len(SWEEP_THRESHOLDS) == 19
    assert SWEEP_THRESHOLDS[0] == 0.05 and SWEEP_THRESHOLDS[-1] == 0.95


def test_example_counts():
    labels = np.array([1, 1, 0, 2, 1, 0])
    scores = np.array([0.9, 0.2, 0.6, 0.1, 0.45, 0.3])
    m = confusion_metrics(labels, scores, 1, 0.45)
    # tp=2 (0.9, 0.45) fp=1 fn=1 tn=2
    assert m["iou"] == pytest.approx(0.5)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == m["sensitivity"] == pytest.approx(2 / 3)
    assert m["specificity"] == pytest.approx(2 / 3)


def test_degenerate_conventions():
    assert metrics_from_counts(0, 0, 0, 10) == {"iou": 1.0, "precision": 1.0, "recall": 1.0,
                                                "sensitivity": 1.0, "specificity": 1.0}
    m = metrics_from_counts(0, 0, 5, 0)
    assert m["iou"] == 0 and m["precision"] == 0 and m["recall"] == 0 and m["specificity"] == 0
    m = metrics_from_counts(0, 4, 0, 0)
    assert m["recall"] == 0 and m["precision"] == 0 and m["specificity"] == 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, 40, elements=st.integers(0, 2)),
       arrays(np.float64, 40, elements=st.floats(0, 1)),
       arrays(bool, 40),
       st.integers(0, 2))
def test_counts_match_brute_force(labels, scores, valid, cls):
    th = np.array([0.95, 0.05, 0.5, 0.45])
    got = confusion_counts(labels, scores, cls, th, valid)
    for t, row in zip(th, got):
        assert tuple(row) == brute_counts(labels, scores, cls, t, valid)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, 30, elements=st.integers(0, 2)),
       arrays(np.float64, 30, elements=st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])))
def test_auc_equals_mann_whitney(labels, scores):
    pos, neg = scores[labels == 1], scores[labels != 1]
    a = auc(labels, scores, 1)
    if pos.size == 0 or neg.size == 0:
        assert math.isnan(a)
        return
    u = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg) / (pos.size * neg.size)
    assert a == pytest.approx(u, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, 50, elements=st.integers(0, 2)),
       arrays(np.float64, 50, elements=st.floats(0, 1)))
def test_sweep_monotone(labels, scores):
    rows = [confusion_metrics(labels, scores, 2, t) for t in SWEEP_THRESHOLDS]
    rec = [r["recall"] for r in rows]
    spec = [r["specificity"] for r in rows]
    if (labels == 2).any():
        assert all(b <= a for a, b in zip(rec, rec[1:]))
    if (labels != 2).any():
        assert all(b >= a for a, b in zip(spec, spec[1:]))


def test_pr_crossing_vs_dense_oracle():
    t = np.linspace(0.05, 0.95, 19)
    prec = 0.3 + 0.6 * t
    rec = 1.0 - t
    x = pr_crossing(t, prec, rec)
    dense = np.linspace(0.05, 0.95, 90001)
    ref = dense[np.argmin(np.abs((0.3 + 0.6 * dense) - (1 - dense)))]
    assert x == pytest.approx(ref, abs=1e-4)
    assert pr_crossing(t, np.ones(19), np.zeros(19)) is None


def test_accumulator_order_independent():
    rng = np.random.default_rng(3)
    tiles = [(rng.integers(0, 3, (8, 8)), rng.dirichlet(np.ones(3), (8, 8)), rng.random((8, 8)) < 0.9)
             for _ in range(4)]
    a = ConfusionAccumulator()
    for y, p, v in tiles:
        a.update(y, p, v)
    b = ConfusionAccumulator()
    for y, p, v in tiles[::-1]:
        b.update(y, p, v)
    whole = ConfusionAccumulator().update(np.stack([t[0] for t in tiles]), np.stack([t[1] for t in tiles]),
                                          np.stack([t[2] for t in tiles]))
    for c in a.classes:
        assert np.array_equal(a.counts[c], b.counts[c])
        assert np.array_equal(a.counts[c], whole.counts[c])
    parts = ConfusionAccumulator().update(*tiles[0]).merge(ConfusionAccumulator().update(*tiles[1]))
    two = ConfusionAccumulator().update(*tiles[0]).update(*tiles[1])
    assert all(np.array_equal(parts.counts[c], two.counts[c]) for c in parts.classes)


def test_report_csv_roundtrip():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 3, (16, 16))
    p = rng.dirichlet(np.ones(3), (16, 16))
    rep = threshold_sweep(y, p)
    back = MetricReport.from_csv(rep.to_csv())
    assert len(back.rows) == 57
    for a, b in zip(rep.rows, back.rows):
        assert a["class"] == b["class"]
        for k in ("threshold", "iou", "precision", "recall", "specificity"):
            assert b[k] == pytest.approx(a[k], abs=1e-6)
    for c in rep.auc:
        assert back.auc[c] == pytest.approx(rep.auc[c], abs=1e-6)
    assert "mean_iou_without_background@0.45" in rep.to_csv()


def test_mean_iou_with_and_without_background():
    y = np.array([0, 1, 2, 2])
    p = np.eye(3)[np.array([0, 1, 2, 1])]
    rep = threshold_sweep(y, p)
    assert rep.mean_iou(0.45, True) == pytest.approx((1 + 0.5 + 0.5) / 3)
    assert rep.mean_iou(0.45, False) == pytest.approx(0.5)


def test_report_from_counts_matches_sweep():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 3, (10, 10))
    p = rng.dirichlet(np.ones(3), (10, 10))
    acc = ConfusionAccumulator().update(y, p)
    a, b = report_from_counts(acc), threshold_sweep(y, p)
    assert [r["iou"] for r in a.rows] == [r["iou"] for r in b.rows]


def test_argmax_iou():
    y = np.array([1, 1, 2, 0])
    pred = np.array([1, 2, 2, 1])
    assert argmax_iou(y, pred, 1) == pytest.approx(1 / 3)
    assert argmax_iou(y, pred, 1, np.array([1, 1, 1, 0], bool)) == pytest.approx(0.5)
