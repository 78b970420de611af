"""Class-imbalance weights and the composite weighted CE + dice loss."""
from __future__ import annotations

import numpy as np
import torch

PROB_CLIP = 1e-7
DICE_EPS = 1e-6
# head order for branch weights
HEADS = ("high", "low", "fused")
DEFAULT_HEAD_WEIGHTS = (0.5, 0.5, 1.0)


def dynamic_class_weights(classes, annotated=None, num_classes=3):
    """Per-batch weights ``1 - n_c / n`` rescaled to mean 1.

    ``classes`` / ``annotated`` are arrays of any shape (e.g. a stack of
    masks); only annotated pixels are counted.
    """
    classes = np.asarray(classes)
    if annotated is None:
        annotated = np.ones(classes.shape, dtype=bool)
    sel = classes[np.asarray(annotated, dtype=bool)]
    if sel.size == 0:
        raise ValueError("no annotated pixels in batch")
    counts = np.bincount(sel.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    raw = 1.0 - counts / sel.size
    return raw / raw.mean()


def one_hot(classes, num_classes=3, dtype=torch.float32):
    """(N, H, W) int -> (N, C, H, W) one-hot."""
    t = torch.as_tensor(classes, dtype=torch.long)
    return torch.nn.functional.one_hot(t, num_classes).permute(0, 3, 1, 2).to(dtype)


def _valid(valid, target):
    if valid is None:
        return torch.ones(target.shape[0], *target.shape[2:], dtype=target.dtype)
    return torch.as_tensor(valid).to(target.dtype)


def weighted_ce(target, probs, weights, valid=None):
    """Mean over annotated pixels of ``-sum_c w_c * y_c * log(clip(p_c))``.

    ``target`` and ``probs`` are (N, C, H, W); ``valid`` is (N, H, W).
    """
    if target.shape != probs.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs probs {tuple(probs.shape)}")
    v = _valid(valid, target)
    n = v.sum()
    if n == 0:
        return probs.sum() * 0.0
    w = torch.as_tensor(weights, dtype=probs.dtype).view(1, -1, 1, 1)
    logp = torch.log(torch.clamp(probs, PROB_CLIP, 1.0))
    per_px = -(w * target * logp).sum(dim=1)
    return (per_px * v).sum() / n


def weighted_dice_loss(target, probs, weights, valid=None, eps=DICE_EPS):
    """``sum_c w_c * (1 - 2 I_c / (|Y_c| + |P_c| + eps)) / C`` over annotated pixels.

    A class absent from both target and prediction scores dice 0, so it adds
    its full weight (the loss of fully disjoint masks is ``mean(w)``).
    """
    if target.shape != probs.shape:
        raise ValueError(f"shape mismatch: target {tuple(target.shape)} vs probs {tuple(probs.shape)}")
    v = _valid(valid, target).unsqueeze(1)
    dims = (0, 2, 3)
    inter = (target * probs * v).sum(dim=dims)
    denom = (target * v).sum(dim=dims) + (probs * v).sum(dim=dims) + eps
    w = torch.as_tensor(weights, dtype=probs.dtype)
    return (w * (1.0 - 2.0 * inter / denom)).sum() / target.shape[1]


def total_loss(per_head, head_weights=DEFAULT_HEAD_WEIGHTS, heads=HEADS):
    """Dot product of branch weights with each head's ``wce + wdl``.

    ``per_head`` maps head name to ``(wce, wdl)``; heads missing from it are
    skipped.
    """
    total = 0.0
    for name, wt in zip(heads, head_weights):
        if name in per_head and wt:
            wce, wdl = per_head[name]
            total = total + wt * (wce + wdl)
    return total


def head_losses(probs, targets, valids, weights):
    """``{head: (wce, wdl)}`` for every head present in ``probs``."""
    return {
        h: (weighted_ce(targets[h], probs[h], weights[h], valids[h]),
            weighted_dice_loss(targets[h], probs[h], weights[h], valids[h]))
        for h in probs
    }
