"""One-vs-rest segmentation metrics, threshold sweeps and the CSV report."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SWEEP_THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)
OPERATING_THRESHOLD = 0.45
METRIC_NAMES = ("iou", "precision", "recall", "sensitivity", "specificity")


def _ratio(num, den, empty_ok):
    # 0/0: 1 when the opposite error count is also zero, else 0
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def metrics_from_counts(tp, fp, fn, tn):
    """Confusion-derived metrics with the 0/0 convention documented above."""
    tp, fp, fn, tn = (int(v) for v in (tp, fp, fn, tn))
    recall = _ratio(tp, tp + fn, fp == 0)
    return {
        "iou": _ratio(tp, tp + fp + fn, True),
        "precision": _ratio(tp, tp + fp, fn == 0),
        "recall": recall,
        "sensitivity": recall,
        "specificity": _ratio(tn, tn + fp, fn == 0),
    }


def _flat(labels, scores, valid):
    labels = np.asarray(labels).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    valid = np.ones(labels.shape, dtype=bool) if valid is None else np.asarray(valid, bool).ravel()
    return labels, scores, valid


def confusion_counts(labels, scores, cls, thresholds, valid=None):
    """(T, 4) array of tp, fp, fn, tn for ``score >= t`` at each threshold."""
    labels, scores, valid = _flat(labels, scores, valid)
    th = np.asarray(thresholds, dtype=np.float64).ravel()
    order = np.argsort(th, kind="stable")
    counts = kernels.confusion_counts(labels == cls, scores, valid, th[order])
    out = np.empty_like(counts)
    out[order] = counts
    return out


def confusion_metrics(labels, scores, cls, threshold, valid=None):
    """One-vs-rest metrics for class ``cls`` binarised at ``scores >= threshold``."""
    tp, fp, fn, tn = confusion_counts(labels, scores, cls, [threshold], valid)[0]
    return metrics_from_counts(tp, fp, fn, tn)


def auc(labels, scores, cls, valid=None):
    """ROC area by trapezoidal integration over every distinct score.

    Ties between a positive and a negative count one half, so this equals the
    Mann-Whitney statistic. NaN when either side is empty.
    """
    labels, scores, valid = _flat(labels, scores, valid)
    pos = (labels == cls)[valid]
    s = scores[valid]
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(pos)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def pr_crossing(thresholds, precision, recall):
    """Threshold where precision - recall changes sign (linear interpolation)."""
    d = np.asarray(precision) - np.asarray(recall)
    t = np.asarray(thresholds)
    for i in range(len(d) - 1):
        if d[i] == 0:
            return float(t[i])
        if d[i] * d[i + 1] < 0:
            return float(t[i] + (t[i + 1] - t[i]) * (-d[i]) / (d[i + 1] - d[i]))
    if len(d) and d[-1] == 0:
        return float(t[-1])
    return None


class ConfusionAccumulator:
    """Order-independent sum of per-threshold confusion counts across tiles."""

    def __init__(self, classes=(0, 1, 2), thresholds=SWEEP_THRESHOLDS):
        self.classes = tuple(classes)
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.counts = {c: np.zeros((len(self.thresholds), 4), dtype=np.int64) for c in self.classes}

    def update(self, labels, probs, valid=None):
        """``probs`` is (..., C) with class on the last axis."""
        for c in self.classes:
            self.counts[c] += confusion_counts(labels, probs[..., c], c, self.thresholds, valid)
        return self

    def merge(self, other):
        for c in self.classes:
            self.counts[c] += other.counts[c]
        return self


@dataclass
class MetricReport:
    """Per class and threshold metrics plus per-class AUC.

    Degenerate ratios follow :func:`metrics_from_counts`; AUC is NaN for a
    class with no positives or no negatives.
    """

    rows: list = field(default_factory=list)
    auc: dict = field(default_factory=dict)
    crossing: dict = field(default_factory=dict)
    group: str = "all"

    def table(self, cls):
        return [r for r in self.rows if r["class"] == cls]

    def series(self, cls, name):
        return np.array([r[name] for r in self.table(cls)])

    def at(self, cls, threshold):
        for r in self.table(cls):
            if abs(r["threshold"] - threshold) < 1e-9:
                return r
        raise KeyError((cls, threshold))

    def mean_iou(self, threshold=OPERATING_THRESHOLD, with_background=True):
        classes = sorted({r["class"] for r in self.rows})
        if not with_background:
            classes = [c for c in classes if c != 0]
        return float(np.mean([self.at(c, threshold)["iou"] for c in classes]))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("class,threshold," + ",".join(METRIC_NAMES) + "\n")
        for r in self.rows:
            vals = ",".join(f"{r[m]:.6f}" for m in METRIC_NAMES)
            buf.write(f"{r['class']},{r['threshold']:.2f},{vals}\n")
        buf.write("\nclass,auc\n")
        for c, a in sorted(self.auc.items()):
            buf.write(f"{c},{a:.6f}\n")
        buf.write("\nsummary,value\n")
        if self.rows:
            t = OPERATING_THRESHOLD
            buf.write(f"mean_iou_with_background@{t:.2f},{self.mean_iou(t, True):.6f}\n")
            buf.write(f"mean_iou_without_background@{t:.2f},{self.mean_iou(t, False):.6f}\n")
        for c, x in sorted(self.crossing.items()):
            buf.write(f"pr_crossing_class{c},{'' if x is None else f'{x:.4f}'}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        blocks = [b for b in text.strip().split("\n\n") if b.strip()]
        rep = cls()
        lines = blocks[0].splitlines()
        for line in lines[1:]:
            parts = line.split(",")
            row = {"class": int(parts[0]), "threshold": float(parts[1])}
            row.update({m: float(v) for m, v in zip(METRIC_NAMES, parts[2:])})
            rep.rows.append(row)
        if len(blocks) > 1:
            for line in blocks[1].splitlines()[1:]:
                c, a = line.split(",")
                rep.auc[int(c)] = float(a)
        if len(blocks) > 2:
            for line in blocks[2].splitlines()[1:]:
                key, val = line.split(",")
                if key.startswith("pr_crossing_class"):
                    rep.crossing[int(key[len("pr_crossing_class"):])] = float(val) if val else None
        return rep


def report_from_counts(acc: ConfusionAccumulator, aucs=None, group="all"):
    rep = MetricReport(group=group, auc=dict(aucs or {}))
    for c in acc.classes:
        for t, counts in zip(acc.thresholds, acc.counts[c]):
            rep.rows.append({"class": c, "threshold": float(t), **metrics_from_counts(*counts)})
        rep.crossing[c] = pr_crossing(acc.thresholds, rep.series(c, "precision"),
                                      rep.series(c, "recall"))
    return rep


def threshold_sweep(labels, probs, valid=None, classes=(0, 1, 2), thresholds=SWEEP_THRESHOLDS,
                    group="all"):
    """Metrics at every threshold for each class, AUC and P/R crossing.

    ``probs`` carries classes on its last axis and matches ``labels`` otherwise.
    """
    probs = np.asarray(probs)
    acc = ConfusionAccumulator(classes, thresholds).update(labels, probs, valid)
    aucs = {c: auc(labels, probs[..., c], c, valid) for c in classes}
    return report_from_counts(acc, aucs, group)


def argmax_iou(labels, pred, cls, valid=None):
    """IoU of a hard (argmax) prediction for one class."""
    labels, pred, valid = _flat(labels, pred, valid)
    p, y = (pred == cls)[valid], (labels == cls)[valid]
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    return metrics_from_counts(tp, fp, fn, 0)["iou"]
