"""Cyclic lr schedule, single-stage training, pseudo-labelling and the staged protocol."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import augment, losses, metrics
from .network import (
    NetworkConfig,
    NonFiniteActivationError,
    build_network,
    load_checkpoint,
    save_checkpoint,
    to_tensor,
)
from .pyramid import NUM_CLASSES, OTHERS, TUMOR, LabelMask, save_mask
from .sampler import (
    Batch,
    SlideData,
    balanced_batches,
    batches_per_epoch,
    candidate_pool,
    crop,
    materialize,
)

LOG = logging.getLogger(__name__)

# (stages, base channels) standing in for the small and large encoders
ENCODER_SCALES = {"small": (3, 8), "large": (4, 16)}
ARCHITECTURES = ("unet", "m-unet")
DATASETS = ("annotated_only", "full_set")
WEIGHT_MODES = ("static", "dynamic")


class NonFiniteLossError(RuntimeError):
    pass


class StageFailedError(RuntimeError):
    pass


def lr_schedule(epoch, step_in_epoch, lr0, cycle_epochs=2, decay=0.5, floor=0.1):
    """Stepwise cyclic rate.

    Cycle ``k = epoch // cycle_epochs`` peaks at ``lr0 * decay**k`` and falls
    linearly to ``floor`` times that peak at the cycle's end.
    ``step_in_epoch`` is the fraction of the current epoch already done.
    """
    k = epoch // cycle_epochs
    u = ((epoch % cycle_epochs) + step_in_epoch) / cycle_epochs
    return lr0 * decay**k * (1.0 - (1.0 - floor) * u)


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    name: str
    encoder_scale: str
    dataset: str
    augments: tuple
    threshold: float
    epochs: int
    lr0: float
    batch_size: int = 16
    weight_mode: str = "dynamic"
    static_weights: tuple | None = None
    architecture: str = "m-unet"

    def __post_init__(self):
        object.__setattr__(self, "augments", tuple(self.augments))
        if self.static_weights is not None:
            object.__setattr__(self, "static_weights", tuple(float(w) for w in self.static_weights))
        if self.encoder_scale not in ENCODER_SCALES:
            raise ValueError(f"{self.name}: unknown encoder_scale {self.encoder_scale!r}")
        if self.dataset not in DATASETS:
            raise ValueError(f"{self.name}: unknown dataset {self.dataset!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"{self.name}: unknown weight_mode {self.weight_mode!r}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"{self.name}: unknown architecture {self.architecture!r}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"{self.name}: threshold must lie in (0, 1], got {self.threshold}")
        if self.epochs < 0 or self.lr0 <= 0:
            raise ValueError(f"{self.name}: epochs must be >= 0 and lr0 > 0")
        if self.weight_mode == "static":
            w = self.static_weights or (1.0,) * NUM_CLASSES
            if len(w) != NUM_CLASSES or min(w) < 0:
                raise ValueError(f"{self.name}: static_weights needs {NUM_CLASSES} values >= 0")
            object.__setattr__(self, "static_weights", tuple(w))
        augment.AugmentPlan.from_names(self.augments)

    def augment_plan(self, **kw):
        return augment.AugmentPlan.from_names(self.augments, **kw)

    def to_text(self):
        lines = [
            f"name = {self.name}",
            f"architecture = {self.architecture}",
            f"encoder_scale = {self.encoder_scale}",
            f"dataset = {self.dataset}",
            f"augments = {', '.join(self.augments)}",
            f"threshold = {self.threshold!r}",
            f"epochs = {self.epochs}",
            f"lr0 = {self.lr0!r}",
            f"batch_size = {self.batch_size}",
            f"weight_mode = {self.weight_mode}",
        ]
        if self.static_weights is not None:
            lines.append("static_weights = " + ", ".join(repr(w) for w in self.static_weights))
        return "\n".join(lines) + "\n"


_PLAN_KEYS = {f.name for f in dataclasses.fields(StagePlan)}


def parse_plans(text, source="<plan>"):
    """Parse blank-line separated ``key = value`` blocks, one stage each."""
    plans = []
    block, start = {}, 1
    lines = text.splitlines() + [""]
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if block:
                plans.append(_plan_from_block(block, f"{source}:{start}"))
                block = {}
            continue
        if not block:
            start = i
        if "=" not in line:
            raise ValueError(f"{source}:{i}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _PLAN_KEYS:
            raise ValueError(f"{source}:{i}: unknown key {key!r}")
        if key in block:
            raise ValueError(f"{source}:{i}: duplicate key {key!r}")
        block[key] = val
    return plans


def _plan_from_block(block, where):
    missing = {"name", "encoder_scale", "dataset", "augments", "threshold", "epochs", "lr0"} - set(block)
    if missing:
        raise ValueError(f"{where}: missing keys {sorted(missing)}")
    kw = dict(block)
    try:
        kw["augments"] = tuple(a.strip() for a in block["augments"].split(",") if a.strip())
        kw["threshold"] = float(block["threshold"])
        kw["epochs"] = int(block["epochs"])
        kw["lr0"] = float(block["lr0"])
        if "batch_size" in block:
            kw["batch_size"] = int(block["batch_size"])
        if "static_weights" in block:
            kw["static_weights"] = tuple(float(v) for v in block["static_weights"].split(","))
        return StagePlan(**kw)
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None


def load_plans(path):
    path = Path(path)
    return parse_plans(path.read_text(encoding="utf-8"), str(path))


def write_plans(plans, path):
    Path(path).write_text("\n".join(p.to_text() for p in plans), encoding="utf-8")


def default_plan_path():
    return Path(__file__).with_name("plans") / "table8.plan"


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale knobs shared by every stage."""

    patch_size: int = 512
    level_pair: tuple = (1, 3)
    head_weights: tuple = losses.DEFAULT_HEAD_WEIGHTS
    batch_size: int | None = None  # overrides the plan's value when set
    epoch_scale: float = 1.0
    max_batches_per_epoch: int | None = None
    min_tissue: float = 0.1
    pool_stride: int | None = None
    tile_stride: int | None = None
    cycle_epochs: int = 2
    cycle_decay: float = 0.5
    cycle_floor: float = 0.1
    warm_start: bool = True
    label_threshold_from: str = "parent"  # or "stage"
    jitter_fraction: float = 0.125
    val_pairs: int = 16
    workers: int = 0
    norm_groups: int = 4

    def __post_init__(self):
        object.__setattr__(self, "level_pair", tuple(self.level_pair))
        object.__setattr__(self, "head_weights", tuple(float(w) for w in self.head_weights))
        if self.label_threshold_from not in ("parent", "stage"):
            raise ValueError("label_threshold_from must be 'parent' or 'stage'")
        if len(self.head_weights) != 3 or min(self.head_weights) < 0:
            raise ValueError("head_weights needs 3 non-negative values")
        if self.epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")

    def stage_epochs(self, plan: StagePlan):
        return int(math.ceil(plan.epochs * self.epoch_scale)) if plan.epochs else 0

    def to_dict(self):
        return dataclasses.asdict(self)


def network_config(plan: StagePlan, cfg: TrainConfig, seed=0, dual=None):
    stages, base = ENCODER_SCALES[plan.encoder_scale]
    dual = plan.architecture == "m-unet" if dual is None else dual
    return NetworkConfig(stages=stages, base_channels=base, level_pair=cfg.level_pair,
                         dual=dual, patch_size=cfg.patch_size, norm_groups=cfg.norm_groups,
                         seed=seed)


def equal_budget_single(dual_cfg: NetworkConfig):
    """Single-branch config with at least as many parameters as ``dual_cfg``."""
    target = build_network(dual_cfg).parameter_count()
    step = dual_cfg.norm_groups
    base = dual_cfg.base_channels
    while True:
        cand = dataclasses.replace(dual_cfg, dual=False, base_channels=base)
        if build_network(cand).parameter_count() >= target:
            return cand
        base += step


@dataclass
class StageRecord:
    name: str
    epochs: list = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: str | None = None
    label_threshold: float | None = None
    coverage: float | None = None
    val_iou: dict = field(default_factory=dict)
    # rate and fused-head class weights on the first batch of each epoch
    lr_trace: list = field(default_factory=list)
    weight_trace: list = field(default_factory=list)

    def to_dict(self):
        return dataclasses.asdict(self)


def _targets(masks):
    cls = np.stack([m.classes for m in masks]).astype(np.int64)
    ann = np.stack([m.annotated for m in masks])
    return cls, ann


def _batch_tensors(pairs):
    high = to_tensor(np.stack([p.high for p in pairs]))
    low = to_tensor(np.stack([p.low for p in pairs]))
    tgt = {"high": _targets([p.high_mask for p in pairs]), "low": _targets([p.low_mask for p in pairs])}
    tgt["fused"] = tgt["high"]
    return high, low, tgt


def _loss(model, pairs, plan: StagePlan, head_weights):
    high, low, tgt = _batch_tensors(pairs)
    probs = model(high, low)
    heads = model.heads
    targets, valids, weights = {}, {}, {}
    for h in heads:
        cls, ann = tgt[h]
        targets[h] = losses.one_hot(cls, NUM_CLASSES, probs[h].dtype)
        valids[h] = torch.as_tensor(ann)
        if plan.weight_mode == "dynamic":
            weights[h] = losses.dynamic_class_weights(cls, ann, NUM_CLASSES) if ann.any() else np.ones(NUM_CLASSES)
        else:
            weights[h] = np.asarray(plan.static_weights)
    per_head = losses.head_losses({h: probs[h] for h in heads}, targets, valids, weights)
    if not model.config.dual:
        # a single-branch net has one supervised output
        total = per_head["fused"][0] + per_head["fused"][1]
    else:
        total = losses.total_loss(per_head, head_weights)
    return total, probs["fused"], tgt["fused"], weights["fused"]


def _batch_stats(fused, tgt):
    cls, ann = tgt
    pred = fused.argmax(dim=1).numpy()
    n = int(ann.sum())
    acc = float((pred[ann] == cls[ann]).mean()) if n else float("nan")
    ious = [metrics.argmax_iou(cls, pred, c, ann) for c in range(NUM_CLASSES) if (cls[ann] == c).any()]
    return acc, float(np.mean(ious)) if ious else float("nan")


def train_stage(model, corpus, pool, plan: StagePlan, seed, cfg: TrainConfig = TrainConfig(),
                val_pairs=None, style_bank=(), log=None):
    """Train ``model`` in place on ``pool`` for the plan's (scaled) epochs.

    Returns ``(model, StageRecord)``. Every epoch records train loss,
    categorical accuracy and mean IoU of the fused head, plus the same on
    ``val_pairs`` when given.
    """
    record = StageRecord(plan.name)
    epochs = cfg.stage_epochs(plan)
    if epochs == 0:
        return model, record
    t0 = time.perf_counter()
    bs = cfg.batch_size or plan.batch_size
    nb = batches_per_epoch(pool, bs)
    if cfg.max_batches_per_epoch:
        nb = min(nb, cfg.max_batches_per_epoch)
    if nb == 0:
        raise StageFailedError(f"{plan.name}: pool too small for one batch of {bs}")
    aug = plan.augment_plan()
    stream = balanced_batches(pool, bs, seed=seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=plan.lr0)
    ss = np.random.SeedSequence(seed)
    jitter = int(cfg.patch_size * 2 ** cfg.level_pair[0] * cfg.jitter_fraction)
    model.train()
    for ep in range(epochs):
        ep_seeds = ss.spawn(1)[0].generate_state(nb * 2)
        losses_, accs, ious = [], [], []
        for b in range(nb):
            lr = lr_schedule(ep, b / nb, plan.lr0, cfg.cycle_epochs, cfg.cycle_decay, cfg.cycle_floor)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = next(stream)
            offsets = None
            if "xy_jitter" in aug.enabled:
                offsets = augment.jitter_offsets(len(batch.pairs), jitter, int(ep_seeds[2 * b]))
            pairs = materialize(batch, corpus, cfg.level_pair, cfg.patch_size, cfg.workers, offsets)
            pairs = augment.apply_plan(pairs, aug, int(ep_seeds[2 * b + 1]), style_bank)
            try:
                total, fused, tgt, wts = _loss(model, pairs, plan, cfg.head_weights)
            except NonFiniteActivationError as exc:
                raise NonFiniteLossError(f"{plan.name}: epoch {ep} batch {b} (lr {lr:.3g}): {exc}") from exc
            if not torch.isfinite(total):
                raise NonFiniteLossError(
                    f"{plan.name}: non-finite loss at epoch {ep} batch {b} (lr {lr:.3g})"
                )
            if b == 0:
                record.lr_trace.append(lr)
                record.weight_trace.append([float(w) for w in wts])
            opt.zero_grad()
            total.backward()
            opt.step()
            losses_.append(float(total.detach()))
            a, i = _batch_stats(fused.detach(), tgt)
            accs.append(a)
            ious.append(i)
        entry = {"epoch": ep, "loss": float(np.mean(losses_)), "accuracy": float(np.nanmean(accs)),
                 "mean_iou": float(np.nanmean(ious)), "first_loss": losses_[0], "last_loss": losses_[-1]}
        if val_pairs:
            entry.update(evaluate_pairs(model, val_pairs, plan, cfg))
            model.train()
        record.epochs.append(entry)
        msg = f"{plan.name} epoch {ep}: " + " ".join(
            f"{k}={v:.4f}" for k, v in entry.items() if k != "epoch")
        LOG.info(msg)
        if log:
            log(msg)
    model.eval()
    record.seconds = time.perf_counter() - t0
    return model, record


@torch.no_grad()
def evaluate_pairs(model, pairs, plan, cfg):
    model.eval()
    total, fused, tgt, _ = _loss(model, pairs, plan, cfg.head_weights)
    acc, miou = _batch_stats(fused, tgt)
    return {"val_loss": float(total), "val_accuracy": acc, "val_mean_iou": miou}


# --------------------------------------------------------------------------
# inference and pseudo-labels
# --------------------------------------------------------------------------

def tile_centers(length, patch_size, stride, step):
    """Tile centres along one axis (level H px) covering ``[0, length)``.

    Centres are multiples of ``step`` so every tile has an exact low-level twin.
    """
    half = patch_size // 2
    cs = list(range(half, max(length - half, half) + 1, stride))
    last = -(-(length - half) // step) * step
    if cs[-1] < length - half:
        cs.append(max(last, cs[-1] + step))
    return cs


@torch.no_grad()
def predict_slide(model, slide, levels=None, patch_size=None, stride=None, batch=8):
    """Overlap-averaged fused probabilities at level H, shape ``(h, w, C)``."""
    cfg = model.config
    levels = tuple(levels or cfg.level_pair)
    patch_size = patch_size or cfg.patch_size
    stride = stride or patch_size // 2
    hi, lo = levels
    r = 2 ** (lo - hi)
    img_h = slide.level(hi)
    h, w = img_h.shape[:2]
    acc = np.zeros((h, w, cfg.num_classes), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    centers = [(x, y) for y in tile_centers(h, patch_size, stride, r)
               for x in tile_centers(w, patch_size, stride, r)]
    model.eval()
    half = patch_size // 2
    for i in range(0, len(centers), batch):
        chunk = centers[i:i + batch]
        highs = np.stack([crop(img_h, c, patch_size) for c in chunk])
        lows = None
        if cfg.dual:
            img_l = slide.level(lo)
            lows = to_tensor(np.stack([crop(img_l, (cx // r, cy // r), patch_size) for cx, cy in chunk]))
        probs = model(to_tensor(highs), lows)["fused"].permute(0, 2, 3, 1).numpy()
        for (cx, cy), p in zip(chunk, probs):
            y0, x0 = cy - half, cx - half
            ys, xs = max(y0, 0), max(x0, 0)
            ye, xe = min(y0 + patch_size, h), min(x0 + patch_size, w)
            acc[ys:ye, xs:xe] += p[ys - y0:ye - y0, xs - x0:xe - x0]
            cnt[ys:ye, xs:xe] += 1
    return (acc / cnt[..., None]).astype(np.float32)


def upsample_labels(classes, annotated, factor, shape):
    """Nearest-neighbour upsample to ``shape`` (level 0)."""
    c = np.repeat(np.repeat(classes, factor, 0), factor, 1)[:shape[0], :shape[1]]
    a = np.repeat(np.repeat(annotated, factor, 0), factor, 1)[:shape[0], :shape[1]]
    return c, a


def labels_from_probs(probs, threshold, human: LabelMask, level):
    """Confident argmax pixels become labels; human annotations always win."""
    conf = probs.max(axis=-1)
    cls, ann = upsample_labels(probs.argmax(axis=-1).astype(np.uint8), conf >= threshold,
                               2**level, human.shape)
    cls = np.where(human.annotated, human.classes, cls).astype(np.uint8)
    return LabelMask(cls, ann | human.annotated, 0)


def pseudo_label(model, corpus, threshold, stride=None):
    """Re-label every slide in ``corpus`` (id -> SlideData with human masks).

    Returns id -> level-0 LabelMask. Per-slide results do not depend on order.
    """
    hi = model.config.level_pair[0]
    out = {}
    for sid in sorted(corpus):
        data = corpus[sid]
        probs = predict_slide(model, data.slide, stride=stride)
        out[sid] = labels_from_probs(probs, threshold, data.mask, hi)
    return out


def slide_iou(model, data: SlideData, classes=(TUMOR, OTHERS), stride=None):
    """One-vs-rest IoU of the fused argmax against the level-H mask."""
    hi = model.config.level_pair[0]
    probs = predict_slide(model, data.slide, stride=stride)
    m = data.mask_at(hi)
    pred = probs.argmax(axis=-1)
    return {c: metrics.argmax_iou(m.classes, pred, c, m.annotated) for c in classes}


def corpus_iou(model, corpus, classes=(TUMOR, OTHERS), stride=None):
    """Pooled one-vs-rest IoU per class over all slides, plus their mean as ``fused``."""
    hi = model.config.level_pair[0]
    labels, preds, valid = [], [], []
    for sid in sorted(corpus):
        data = corpus[sid]
        m = data.mask_at(hi)
        labels.append(m.classes.ravel())
        valid.append(m.annotated.ravel())
        preds.append(predict_slide(model, data.slide, stride=stride).argmax(axis=-1).ravel())
    y, p, v = (np.concatenate(a) for a in (labels, preds, valid))
    out = {c: metrics.argmax_iou(y, p, c, v) for c in classes}
    out["fused"] = float(np.mean([out[c] for c in classes]))
    return out


# --------------------------------------------------------------------------
# multi-step protocol
# --------------------------------------------------------------------------

def build_pool(corpus, cfg: TrainConfig):
    pool = []
    for sid in sorted(corpus):
        pool.extend(candidate_pool(corpus[sid], cfg.level_pair, cfg.patch_size,
                                   cfg.pool_stride, cfg.min_tissue))
    return pool


def _sample_val_pairs(val_corpus, cfg, seed):
    if not val_corpus or not cfg.val_pairs:
        return None
    pool = build_pool(val_corpus, cfg)
    if not pool:
        return None
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pool), size=min(cfg.val_pairs, len(pool)), replace=False)
    return materialize(Batch([pool[i] for i in sorted(pick)], {}), val_corpus,
                       cfg.level_pair, cfg.patch_size)


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class TrainRun:
    seed: int
    stages: list = field(default_factory=list)
    run_dir: str | None = None

    def to_dict(self):
        return {"seed": self.seed, "run_dir": self.run_dir,
                "stages": [s.to_dict() for s in self.stages]}


def multi_step_train(corpus, plans, seed, cfg: TrainConfig = TrainConfig(), run_dir=None,
                     val_corpus=None, style_bank=(), log=None):
    """Base stage then, per master, pseudo-label the full set and train.

    ``corpus`` maps slide id to :class:`SlideData` carrying the human
    (partial) annotation. Labels before master ``i`` come from the model of
    stage ``i-1`` at its own threshold (``label_threshold_from='parent'``)
    or at master ``i``'s threshold (``'stage'``). With ``run_dir`` each stage
    writes ``stage_<k>/`` (checkpoint, label snapshots, record) and finished
    stages are reused on restart.
    """
    if not plans:
        raise ValueError("no stage plans")
    run = TrainRun(seed, run_dir=str(run_dir) if run_dir else None)
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_plans(plans, run_dir / "plans.plan")

    def emit(msg):
        LOG.info(msg)
        if log:
            log(msg)
        if run_dir:
            with open(run_dir / "train.log", "a", encoding="utf-8") as fh:
                fh.write(msg + "\n")

    val_pairs = _sample_val_pairs(val_corpus, cfg, seed + 7919)
    ss = np.random.SeedSequence(seed)
    stage_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(plans))]
    model, parent_plan = None, None
    for k, plan in enumerate(plans):
        sdir = run_dir / f"stage_{k}" if run_dir else None
        if sdir and (sdir / "done").exists():
            model, _ = load_checkpoint(sdir / "checkpoint.pt")
            run.stages.append(StageRecord(**json.loads((sdir / "record.json").read_text())))
            parent_plan = plan
            emit(f"stage {k} ({plan.name}): reused finished checkpoint")
            continue
        try:
            record_extra = {}
            if plan.dataset == "annotated_only" or model is None:
                data = corpus
            else:
                thr = parent_plan.threshold if cfg.label_threshold_from == "parent" else plan.threshold
                labels = pseudo_label(model, corpus, thr, cfg.tile_stride)
                for sid, m in labels.items():
                    h = corpus[sid].mask
                    if not np.array_equal(m.classes[h.annotated], h.classes[h.annotated]):
                        raise StageFailedError(f"pseudo-labels overwrote human annotation on {sid}")
                data = {sid: corpus[sid].with_mask(labels[sid]) for sid in corpus}
                cov = float(np.mean([m.coverage() for m in labels.values()]))
                record_extra = {"label_threshold": thr, "coverage": cov}
                emit(f"stage {k} ({plan.name}): labelled at {thr} coverage {cov:.4f}")
                if sdir:
                    for sid, m in labels.items():
                        (sdir / "labels").mkdir(parents=True, exist_ok=True)
                        save_mask(m, sdir / "labels" / f"{sid}.png")
            pool = build_pool(data, cfg)
            emit(f"stage {k} ({plan.name}): pool {len(pool)} "
                 f"(tumor {sum(d.patch_class == TUMOR for d in pool)})")
            ncfg = network_config(plan, cfg, seed=stage_seeds[k])
            fresh = build_network(ncfg)
            if cfg.warm_start and model is not None and model.config == dataclasses.replace(ncfg, seed=model.config.seed):
                fresh.load_state_dict(model.state_dict())
            model, record = train_stage(fresh, data, pool, plan, stage_seeds[k], cfg,
                                        val_pairs, style_bank, emit)
            record.label_threshold = record_extra.get("label_threshold")
            record.coverage = record_extra.get("coverage")
            if val_corpus:
                record.val_iou = {str(c): v for c, v in corpus_iou(model, val_corpus,
                                                                    stride=cfg.tile_stride).items()}
                emit(f"stage {k} ({plan.name}): held-out iou {record.val_iou}")
        except (NonFiniteLossError, StageFailedError, ValueError) as exc:
            emit(f"stage {k} ({plan.name}) failed: {exc}")
            raise StageFailedError(f"stage {k} ({plan.name}): {exc}") from exc
        if sdir:
            save_checkpoint(model, sdir / "checkpoint.pt", {"stage": k, "plan": plan.to_text()})
            record.checkpoint = str(sdir / "checkpoint.pt")
            (sdir / "record.json").write_text(json.dumps(record.to_dict(), indent=1))
            (sdir / "done").write_text(file_hash(sdir / "checkpoint.pt") + "\n")
        run.stages.append(record)
        parent_plan = plan
    if run_dir:
        (run_dir / "run.json").write_text(json.dumps(run.to_dict(), indent=1))
    return model, run


def load_human_corpus(slides_and_masks):
    """Helper: ``[(slide, mask), ...]`` -> id -> SlideData."""
    return {s.id: SlideData(s, m) for s, m in slides_and_masks}
