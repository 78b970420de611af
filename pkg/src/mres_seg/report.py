"""Heatmaps, group box statistics and curve plots for evaluation output."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from . import metrics
from .pyramid import to_gray

HEAT_RGB = np.array([200.0, 0.0, 0.0])


def heatmap_overlay(level_image, prob):
    """Grayscale slide with a red layer whose alpha is the class probability."""
    gray = to_gray(level_image).astype(np.float64)[..., None].repeat(3, axis=2)
    a = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)[..., None]
    return np.round((1.0 - a) * gray + a * HEAT_RGB).astype(np.uint8)


def box_stats(values):
    """min, lower quartile, median, upper quartile, max (NaNs dropped)."""
    v = np.asarray([x for x in values if not np.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return {k: float("nan") for k in ("min", "q1", "median", "q3", "max")} | {"n": 0}
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return {"n": int(v.size), "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4]}


def per_slide_iou(labels, probs, valid, classes=(1, 2), threshold=metrics.OPERATING_THRESHOLD):
    """IoU of ``prob_c >= threshold`` per class for one slide."""
    return {c: metrics.confusion_metrics(labels, probs[..., c], c, threshold, valid)["iou"]
            for c in classes}


def group_box_table(slide_ious, slide_groups, classes=(1, 2)):
    """Rows ``(group, class, stats)`` from per-slide IoUs and group tags."""
    rows = []
    for g in sorted(set(slide_groups.values())):
        ids = [s for s in sorted(slide_ious) if slide_groups[s] == g]
        for c in classes:
            rows.append((g, c, box_stats([slide_ious[s][c] for s in ids])))
    return rows


def box_table_csv(rows):
    out = ["group,class,n,min,q1,median,q3,max"]
    for g, c, st in rows:
        out.append(f"{g},{c},{st['n']}," + ",".join(f"{st[k]:.6f}" for k in ("min", "q1", "median", "q3", "max")))
    return "\n".join(out) + "\n"


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _save_fig(fig, path):
    path = Path(path)
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, dpi=90)
    os.replace(tmp, path)


def plot_curves(report: metrics.MetricReport, out_dir, classes=(1, 2), box_rows=None):
    """IoU vs threshold, P-R, sensitivity vs specificity and ROC as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = {1: "tumor", 2: "others", 0: "background"}
    written = []
    specs = [
        ("iou_vs_threshold", "threshold", "iou"),
        ("precision_recall", "recall", "precision"),
        ("sensitivity_specificity", "specificity", "sensitivity"),
        ("roc", "fpr", "sensitivity"),
    ]
    for fname, xk, yk in specs:
        fig, ax = plt.subplots(figsize=(4, 4))
        for c in classes:
            t = report.table(c)
            if not t:
                continue
            x = np.array([1.0 - r["specificity"] if xk == "fpr" else r[xk] for r in t])
            y = np.array([r[yk] for r in t])
            if fname == "roc":
                x, y = np.r_[1.0, x, 0.0], np.r_[1.0, y, 0.0]
                label = f"{names.get(c, c)} (auc {report.auc.get(c, float('nan')):.3f})"
            else:
                label = names.get(c, str(c))
            ax.plot(x, y, marker=".", label=label)
        ax.set_xlabel(xk)
        ax.set_ylabel(yk)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save_fig(fig, out_dir / f"{fname}.png")
        plt.close(fig)
        written.append(out_dir / f"{fname}.png")
    if box_rows:
        fig, ax = plt.subplots(figsize=(5, 4))
        labels, stats = [], []
        for g, c, st in box_rows:
            if st["n"]:
                labels.append(f"{g}:{names.get(c, c)}")
                stats.append({"label": labels[-1], "whislo": st["min"], "q1": st["q1"],
                              "med": st["median"], "q3": st["q3"], "whishi": st["max"],
                              "fliers": []})
        if stats:
            ax.bxp(stats, showfliers=False)
            ax.tick_params(axis="x", labelrotation=60, labelsize=7)
            ax.set_ylabel("per-slide iou")
            fig.tight_layout()
            _save_fig(fig, out_dir / "group_iou_box.png")
            written.append(out_dir / "group_iou_box.png")
        plt.close(fig)
    return written
