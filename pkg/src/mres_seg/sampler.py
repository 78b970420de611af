"""Co-centred multi-resolution patch pairs and class-balanced batch streams."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .pyramid import BACKGROUND, OTHERS, TUMOR, LabelMask, PyramidalSlide, otsu_tissue_mask

LOG = logging.getLogger(__name__)

# patch-level labelling rule
PRESENCE_FRACTION = 0.05
MIN_ANNOTATED_FRACTION = 0.01


class InsufficientPoolError(ValueError):
    pass


def downsample_mask(mask: LabelMask, factor: int) -> LabelMask:
    """Majority vote over ``factor x factor`` windows of annotated pixels.

    Ties go tumor > others > background. A window is annotated when at least
    half of its source pixels are (pixels beyond the edge count as not).
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    if factor == 1:
        return LabelMask(mask.classes.copy(), mask.annotated.copy(), mask.level)
    cls, ann = kernels.majority_downsample(
        np.ascontiguousarray(mask.classes, dtype=np.uint8),
        np.ascontiguousarray(mask.annotated, dtype=np.bool_),
        factor,
    )
    return LabelMask(cls, ann, mask.level + int(np.log2(factor)))


@dataclass
class SlideData:
    """A slide plus its level-0 label mask, with per-level masks cached."""

    slide: PyramidalSlide
    mask: LabelMask
    _levels: dict = field(default_factory=dict, repr=False)

    @property
    def id(self):
        return self.slide.id

    def mask_at(self, k) -> LabelMask:
        if k not in self._levels:
            self._levels[k] = downsample_mask(self.mask, 2**k)
        return self._levels[k]

    def with_mask(self, mask: LabelMask) -> "SlideData":
        return SlideData(self.slide, mask)


class Descriptor(NamedTuple):
    slide_id: str
    center_x: int
    center_y: int
    patch_class: int


@dataclass
class PatchPair:
    high: np.ndarray
    low: np.ndarray
    high_mask: LabelMask
    low_mask: LabelMask
    center: tuple
    levels: tuple
    patch_class: int | None = None


@dataclass
class Batch:
    pairs: list
    class_counts: dict


def _reflect(idx, n):
    """numpy 'reflect' padding index map (edge not repeated)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def snap_center(center, coarse_level):
    """Snap a level-0 coordinate to the grid shared by every level <= coarse_level."""
    step = 2**coarse_level
    return tuple(int(round(c / step)) * step for c in center)


def crop(level_img, center_xy, size, mask: LabelMask | None = None):
    """``size`` x ``size`` crop centred at ``center_xy`` with reflect padding.

    Padded mask pixels are marked unannotated.
    """
    h, w = level_img.shape[:2]
    cx, cy = center_xy
    rows = np.arange(cy - size // 2, cy - size // 2 + size)
    cols = np.arange(cx - size // 2, cx - size // 2 + size)
    rr, cc = _reflect(rows, h), _reflect(cols, w)
    img = level_img[np.ix_(rr, cc)]
    if mask is None:
        return img
    inside = ((rows >= 0) & (rows < h))[:, None] & ((cols >= 0) & (cols < w))[None, :]
    m = LabelMask(
        mask.classes[np.ix_(rr, cc)],
        mask.annotated[np.ix_(rr, cc)] & inside,
        mask.level,
    )
    return img, m


def extract_patch_pair(data, center, levels=(1, 3), patch_size=512) -> PatchPair:
    """Extract co-centred patches at levels ``(H, L)`` around a level-0 centre.

    ``data`` is a :class:`SlideData` (masks cropped too) or a bare slide.
    The centre is snapped to a multiple of ``2**L`` so both crops share it.
    """
    hi, lo = levels
    slide = data.slide if isinstance(data, SlideData) else data
    if not (0 <= hi < lo < slide.num_levels):
        raise ValueError(f"invalid level pair {levels} for {slide.num_levels} levels")
    cx, cy = snap_center(center, lo)
    out = {}
    for name, k in (("high", hi), ("low", lo)):
        c = (cx >> k, cy >> k)
        if isinstance(data, SlideData):
            out[name], out[name + "_mask"] = crop(slide.level(k), c, patch_size, data.mask_at(k))
        else:
            out[name] = crop(slide.level(k), c, patch_size)
            out[name + "_mask"] = None
    pair = PatchPair(center=(cx, cy), levels=(hi, lo), **out)
    if pair.high_mask is not None:
        pair.patch_class = label_patch(pair.high_mask)
    return pair


def label_patch(high_mask: LabelMask):
    """Patch class from the high-resolution mask, or ``None`` when rejected."""
    ann = high_mask.annotated
    n = int(ann.sum())
    if n < MIN_ANNOTATED_FRACTION * ann.size or n == 0:
        return None
    cls = high_mask.classes[ann]
    if (cls == TUMOR).sum() >= PRESENCE_FRACTION * n:
        return TUMOR
    if (cls == OTHERS).sum() >= PRESENCE_FRACTION * n:
        return OTHERS
    return BACKGROUND


def candidate_pool(data: SlideData, levels=(1, 3), patch_size=512, stride=None, min_tissue=0.1):
    """Grid of patch descriptors over one slide.

    Centres lie on a grid of ``stride`` pixels at level H. Patches with less
    than ``min_tissue`` Otsu tissue or too little annotation are skipped.
    """
    hi, lo = levels
    stride = stride or patch_size // 2
    tissue = otsu_tissue_mask(data.slide.level(hi)).mask
    mask_h = data.mask_at(hi)
    hh, ww = mask_h.shape
    half = patch_size // 2
    out = []
    for y in range(half, max(hh - half, half) + 1, stride):
        for x in range(half, max(ww - half, half) + 1, stride):
            sx, sy = snap_center((x << hi, y << hi), lo)
            cx, cy = sx >> hi, sy >> hi
            t = tissue[max(cy - half, 0):cy + half, max(cx - half, 0):cx + half]
            if t.size == 0 or t.mean() < min_tissue:
                continue
            _, m = crop(data.slide.level(hi), (cx, cy), patch_size, mask_h)
            pc = label_patch(m)
            if pc is not None:
                out.append(Descriptor(data.id, sx, sy, pc))
    return out


def write_pool(pool, path):
    with open(path, "w", encoding="utf-8") as fh:
        for d in pool:
            fh.write(f"{d.slide_id} {d.center_x} {d.center_y} {d.patch_class}\n")


def read_pool(path):
    pool = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{i}: expected 4 fields, got {len(parts)}")
        pool.append(Descriptor(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
    return pool


def _class_quota(batch_size):
    if batch_size % 4:
        raise ValueError(f"batch_size must be a multiple of 4, got {batch_size}")
    q = batch_size // 4
    return {TUMOR: 2 * q, BACKGROUND: q, OTHERS: q}


def batches_per_epoch(pool, batch_size):
    quota = _class_quota(batch_size)
    return sum(1 for d in pool if d.patch_class == TUMOR) // quota[TUMOR]


def balanced_batches(pool, batch_size=16, seed=0, epochs=None):
    """Yield batches with a fixed 2:1:1 tumor:normal:others composition.

    Each class is drawn from its own seeded permutation. An epoch ends when
    the tumor permutation is used up; the smaller pools are reshuffled and
    reused whenever they run out. The stream is a pure function of
    ``(pool, batch_size, seed)``.
    """
    quota = _class_quota(batch_size)
    by_class = {c: [d for d in pool if d.patch_class == c] for c in quota}
    for c, need in quota.items():
        if len(by_class[c]) < need:
            raise InsufficientPoolError(
                f"class {c} has {len(by_class[c])} descriptors, batch needs {need}"
            )
    rng = np.random.default_rng(seed)
    queues = {c: [] for c in (BACKGROUND, OTHERS)}
    epoch = 0
    while epochs is None or epoch < epochs:
        tumor = [by_class[TUMOR][i] for i in rng.permutation(len(by_class[TUMOR]))]
        for b in range(len(tumor) // quota[TUMOR]):
            pairs = list(tumor[b * quota[TUMOR]:(b + 1) * quota[TUMOR]])
            for c in (BACKGROUND, OTHERS):
                for _ in range(quota[c]):
                    if not queues[c]:
                        queues[c] = [by_class[c][i] for i in rng.permutation(len(by_class[c]))]
                    pairs.append(queues[c].pop(0))
            yield Batch(pairs, {c: quota[c] for c in (TUMOR, BACKGROUND, OTHERS)})
        epoch += 1


def materialize(batch: Batch, corpus, levels=(1, 3), patch_size=512, workers=0, offsets=None):
    """Turn descriptors into :class:`PatchPair` objects, preserving order.

    ``offsets`` optionally shifts each centre (level-0 pixels), e.g. for
    xy-jitter. Worker threads only fill slots; the output order is fixed.
    """
    offsets = offsets if offsets is not None else [(0, 0)] * len(batch.pairs)

    def one(args):
        d, (ox, oy) = args
        pair = extract_patch_pair(corpus[d.slide_id], (d.center_x + ox, d.center_y + oy),
                                  levels, patch_size)
        # jittered pairs keep the sampled class for bookkeeping
        pair.patch_class = d.patch_class
        return pair

    items = list(zip(batch.pairs, offsets))
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, items))
    return [one(it) for it in items]
