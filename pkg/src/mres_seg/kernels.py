"""Hot numeric kernels.

Each kernel exists twice: an explicit-loop version compiled with numba
(``*_nb``) and a vectorised numpy version (``*_np``). The public name is
bound to one of them at import time according to ``MRES_SEG_NUMBA``.
Both paths must agree bit-for-bit; ``tests/test_kernels.py`` checks that and
``benchmarks/bench_kernels.py`` times them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# tie priority for majority votes: tumor > others > background
MAJORITY_ORDER = (1, 2, 0)


# --------------------------------------------------------------------------
# 2x2 box-mean downsample, round-half-up, ceil output dims
# --------------------------------------------------------------------------

@njit
def box_downsample_nb(img):
    h, w, c = img.shape
    oh = (h + 1) // 2
    ow = (w + 1) // 2
    out = np.empty((oh, ow, c), dtype=np.uint8)
    for i in range(oh):
        r0 = 2 * i
        r1 = min(r0 + 2, h)
        for j in range(ow):
            c0 = 2 * j
            c1 = min(c0 + 2, w)
            cnt = (r1 - r0) * (c1 - c0)
            for k in range(c):
                s = 0
                for r in range(r0, r1):
                    for q in range(c0, c1):
                        s += img[r, q, k]
                out[i, j, k] = (s + cnt // 2) // cnt
    return out


def box_downsample_np(img):
    h, w, c = img.shape
    ph, pw = h % 2, w % 2
    x = np.pad(img.astype(np.int64), ((0, ph), (0, pw), (0, 0)))
    ones = np.pad(np.ones((h, w), dtype=np.int64), ((0, ph), (0, pw)))
    oh, ow = x.shape[0] // 2, x.shape[1] // 2
    s = x.reshape(oh, 2, ow, 2, c).sum(axis=(1, 3))
    cnt = ones.reshape(oh, 2, ow, 2).sum(axis=(1, 3))[..., None]
    return ((s + cnt // 2) // cnt).astype(np.uint8)


# --------------------------------------------------------------------------
# majority-vote mask downsample
# --------------------------------------------------------------------------

@njit
def majority_downsample_nb(classes, annotated, factor):
    h, w = classes.shape
    oh = (h + factor - 1) // factor
    ow = (w + factor - 1) // factor
    out_cls = np.zeros((oh, ow), dtype=np.uint8)
    out_ann = np.zeros((oh, ow), dtype=np.bool_)
    area = factor * factor
    counts = np.zeros(3, dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            counts[:] = 0
            n = 0
            for r in range(i * factor, min((i + 1) * factor, h)):
                for q in range(j * factor, min((j + 1) * factor, w)):
                    if annotated[r, q]:
                        counts[classes[r, q]] += 1
                        n += 1
            # priority order 1, 2, 0; strict > keeps the earlier class on ties
            best = 1
            if counts[2] > counts[best]:
                best = 2
            if counts[0] > counts[best]:
                best = 0
            out_cls[i, j] = best if n > 0 else 0
            out_ann[i, j] = 2 * n >= area
    return out_cls, out_ann


def majority_downsample_np(classes, annotated, factor):
    h, w = classes.shape
    ph, pw = (-h) % factor, (-w) % factor
    cls = np.pad(classes, ((0, ph), (0, pw)))
    ann = np.pad(annotated.astype(bool), ((0, ph), (0, pw)))
    oh, ow = cls.shape[0] // factor, cls.shape[1] // factor
    cls = cls.reshape(oh, factor, ow, factor)
    ann = ann.reshape(oh, factor, ow, factor)
    counts = np.stack(
        [((cls == k) & ann).sum(axis=(1, 3)) for k in MAJORITY_ORDER]
    )
    n = ann.sum(axis=(1, 3))
    best = np.asarray(MAJORITY_ORDER, dtype=np.uint8)[counts.argmax(axis=0)]
    best[n == 0] = 0
    return best, 2 * n >= factor * factor


# --------------------------------------------------------------------------
# Otsu threshold from a 256-bin histogram
# --------------------------------------------------------------------------

@njit
def otsu_from_hist_nb(hist):
    total = 0.0
    total_sum = 0.0
    for i in range(256):
        total += hist[i]
        total_sum += i * hist[i]
    best_t = -1
    best_v = -1.0
    n0 = 0.0
    s0 = 0.0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0.0 or n1 == 0.0:
            continue
        m0 = s0 / n0
        m1 = (total_sum - s0) / n1
        v = n0 * n1 * (m0 - m1) * (m0 - m1)
        if v > best_v:
            best_v = v
            best_t = t
    return best_t


def otsu_from_hist_np(hist):
    hist = np.asarray(hist, dtype=np.float64)
    levels = np.arange(256, dtype=np.float64)
    n0 = np.cumsum(hist)[:255]
    s0 = np.cumsum(hist * levels)[:255]
    total = hist.sum()
    n1 = total - n0
    ok = (n0 > 0) & (n1 > 0)
    if not ok.any():
        return -1
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = s0 / n0
        m1 = (s0[-1] + hist[255] * 255.0 - s0) / n1
        v = n0 * n1 * (m0 - m1) ** 2
    v[~ok] = -1.0
    return int(np.argmax(v))


# --------------------------------------------------------------------------
# thresholded confusion counts
# --------------------------------------------------------------------------

@njit
def confusion_counts_nb(positive, scores, valid, thresholds):
    """counts[t] = (tp, fp, fn, tn) with prediction = score >= thresholds[t]."""
    nt = thresholds.shape[0]
    # hist[k]: pixels whose score passes exactly the first k thresholds
    pos_hist = np.zeros(nt + 1, dtype=np.int64)
    neg_hist = np.zeros(nt + 1, dtype=np.int64)
    for i in range(scores.shape[0]):
        if not valid[i]:
            continue
        s = scores[i]
        lo = 0
        hi = nt
        while lo < hi:
            mid = (lo + hi) // 2
            if thresholds[mid] <= s:
                lo = mid + 1
            else:
                hi = mid
        if positive[i]:
            pos_hist[lo] += 1
        else:
            neg_hist[lo] += 1
    out = np.zeros((nt, 4), dtype=np.int64)
    n_pos = pos_hist.sum()
    n_neg = neg_hist.sum()
    tp = 0
    fp = 0
    for k in range(nt, 0, -1):
        tp += pos_hist[k]
        fp += neg_hist[k]
        out[k - 1, 0] = tp
        out[k - 1, 1] = fp
        out[k - 1, 2] = n_pos - tp
        out[k - 1, 3] = n_neg - fp
    return out


def confusion_counts_np(positive, scores, valid, thresholds):
    pos = np.sort(scores[valid & positive])
    neg = np.sort(scores[valid & ~positive])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return np.stack([tp, fp, pos.size - tp, neg.size - fp], axis=1).astype(np.int64)


if USE_NUMBA:
    box_downsample = box_downsample_nb
    majority_downsample = majority_downsample_nb
    otsu_from_hist = otsu_from_hist_nb
    confusion_counts = confusion_counts_nb
else:
    box_downsample = box_downsample_np
    majority_downsample = majority_downsample_np
    otsu_from_hist = otsu_from_hist_np
    confusion_counts = confusion_counts_np

BACKEND = "numba" if USE_NUMBA else "numpy"
