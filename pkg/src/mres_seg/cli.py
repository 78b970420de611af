"""``mres-seg`` command line: synth, train, predict, eval."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, report
from .pyramid import (
    CLASS_NAMES,
    LabelMask,
    SlideFormatError,
    SynthSpec,
    load_mask,
    load_slide,
    partial_annotation,
    save_mask,
    save_slide,
    synth_slide,
)

LOG = logging.getLogger("mres_seg")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
STAINS = ("ER", "PR", "HER2", "Ki67")
SCANNERS = ("Morphle", "Optrascan", "Philips")
SOURCES = ("DS1", "DS2", "DS3", "DS4", "DS5", "DS6")
CORPUS_FILE = "corpus.tsv"
CORPUS_COLUMNS = ("id", "dir", "seed", "stain", "scanner", "source")
TRUTH_FILE = "truth_level0.png"
GROUP_KEYS = ("none", "stain", "scanner", "source")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; written as ``run_config.json`` next to its output."""

    command: str = ""
    data_dir: str | None = None
    run_dir: str | None = None
    plan: str | None = None
    seed: int | None = None
    level_pair: tuple = (1, 3)
    patch_size: int = 512
    device: str = "cpu"
    thresholds: tuple = tuple(float(t) for t in metrics.SWEEP_THRESHOLDS)
    spec_file: str | None = None
    count: int = 0
    annotation: str = "full"
    val_dir: str | None = None
    epoch_scale: float = 1.0
    max_batches_per_epoch: int | None = None
    checkpoint: str | None = None
    slide_dirs: tuple = ()
    out: str | None = None
    predictions: str | None = None
    group_by: str = "none"
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown RunConfig keys {sorted(unknown)}")
        for k in ("level_pair", "thresholds", "slide_dirs"):
            if k in raw and raw[k] is not None:
                raw[k] = tuple(raw[k])
        return cls(**raw)


def echo_config(cfg: RunConfig, out_dir):
    report.atomic_write_text(Path(out_dir) / "run_config.json", cfg.to_json() + "\n")


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------

def write_corpus(rows, out_dir):
    lines = ["\t".join(CORPUS_COLUMNS)]
    lines += ["\t".join(str(r[c]) for c in CORPUS_COLUMNS) for r in rows]
    report.atomic_write_text(Path(out_dir) / CORPUS_FILE, "\n".join(lines) + "\n")


def read_corpus(data_dir):
    data_dir = Path(data_dir)
    path = data_dir / CORPUS_FILE
    if not path.exists():
        raise ConfigError(f"no {CORPUS_FILE} in {data_dir}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != CORPUS_COLUMNS:
        raise ConfigError(f"{path}: bad header")
    return [dict(zip(CORPUS_COLUMNS, ln.split("\t"))) for ln in lines[1:] if ln.strip()]


def load_corpus(data_dir, truth=False):
    """id -> SlideData using the stored annotation (or ground truth when ``truth``)."""
    from .sampler import SlideData

    out = {}
    for row in read_corpus(data_dir):
        sdir = Path(data_dir) / row["dir"]
        slide, mask = load_slide(sdir, with_mask=True)
        if truth and (sdir / TRUTH_FILE).exists():
            mask = load_mask(sdir / TRUTH_FILE)
        if mask is None:
            raise ConfigError(f"{sdir}: no mask")
        out[slide.id] = SlideData(slide, mask)
    return out


def cmd_synth(cfg: RunConfig):
    if cfg.count < 0:
        raise ConfigError("count must be >= 0")
    if cfg.annotation not in ("full", "partial"):
        raise ConfigError("annotation must be 'full' or 'partial'")
    base = SynthSpec()
    if cfg.spec_file:
        base = SynthSpec.from_text(Path(cfg.spec_file).read_text(encoding="utf-8"))
    out = Path(cfg.out or cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(cfg.count):
        spec = dataclasses.replace(base, seed=cfg.seed + i, stain=STAINS[i % len(STAINS)],
                                   scanner=SCANNERS[i % len(SCANNERS)],
                                   source=SOURCES[i % len(SOURCES)])
        slide, mask = synth_slide(spec)
        sdir = out / slide.id
        stored = mask if cfg.annotation == "full" else partial_annotation(mask, seed=spec.seed)
        save_slide(slide, sdir, stored)
        save_mask(mask, sdir / TRUTH_FILE)
        report.atomic_write_text(sdir / "synth.spec", spec.to_text())
        rows.append({"id": slide.id, "dir": slide.id, "seed": spec.seed, "stain": spec.stain,
                     "scanner": spec.scanner, "source": spec.source})
        LOG.info("wrote %s", sdir)
    write_corpus(rows, out)
    echo_config(cfg, out)
    return out


# --------------------------------------------------------------------------
# train / predict / eval
# --------------------------------------------------------------------------

def _train_config(cfg: RunConfig):
    from .trainer import TrainConfig

    return TrainConfig(patch_size=cfg.patch_size, level_pair=cfg.level_pair,
                       epoch_scale=cfg.epoch_scale, max_batches_per_epoch=cfg.max_batches_per_epoch,
                       **cfg.extra.get("train", {}))


def cmd_train(cfg: RunConfig):
    from . import trainer

    plan_path = Path(cfg.plan) if cfg.plan else trainer.default_plan_path()
    plans = trainer.load_plans(plan_path)
    corpus = load_corpus(cfg.data_dir)
    val = load_corpus(cfg.val_dir, truth=True) if cfg.val_dir else None
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir)
    tcfg = _train_config(cfg)
    bank = ()
    if any("style_infuse" in p.augments for p in plans):
        from .augment import build_style_bank, write_style_bank

        bank = build_style_bank([d.slide for d in corpus.values()])
        write_style_bank(bank, run_dir / "style_bank.txt")
    model, run = trainer.multi_step_train(corpus, plans, cfg.seed, tcfg, run_dir, val, bank)
    from .network import save_checkpoint

    save_checkpoint(model, run_dir / "final.pt", {"seed": cfg.seed})
    return run_dir


def _slide_dirs(cfg: RunConfig):
    dirs = [Path(d) for d in cfg.slide_dirs]
    if cfg.data_dir:
        dirs += [Path(cfg.data_dir) / r["dir"] for r in read_corpus(cfg.data_dir)]
    if not dirs:
        raise ConfigError("no slides given")
    return dirs


def predict_to_dir(model, slide, out_dir, stride=None):
    """Write per-class probability rasters, argmax mask and heatmaps for one slide."""
    from PIL import Image

    from .trainer import predict_slide

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hi = model.config.level_pair[0]
    probs = predict_slide(model, slide, stride=stride)
    for c in range(probs.shape[-1]):
        tmp = out_dir / f"prob_class{c}.tmp.npy"
        np.save(tmp, probs[..., c])
        tmp.replace(out_dir / f"prob_class{c}.npy")
        heat = report.heatmap_overlay(slide.level(hi), probs[..., c])
        tmpi = out_dir / f"heatmap_{CLASS_NAMES[c]}.tmp.png"
        Image.fromarray(heat).save(tmpi, format="PNG")
        tmpi.replace(out_dir / f"heatmap_{CLASS_NAMES[c]}.png")
    argmax = probs.argmax(axis=-1).astype(np.uint8)
    save_mask(LabelMask.full(argmax, level=hi), out_dir / "argmax.png")
    report.atomic_write_text(out_dir / "prediction.json", json.dumps(
        {"slide_id": slide.id, "level": hi, "shape": list(probs.shape[:2]),
         "tags": slide.tags}, indent=1) + "\n")
    return probs


def cmd_predict(cfg: RunConfig):
    from .network import load_checkpoint

    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    model, _ = load_checkpoint(cfg.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for sdir in _slide_dirs(cfg):
        slide = load_slide(sdir)
        predict_to_dir(model, slide, out / slide.id)
        LOG.info("predicted %s", slide.id)
    echo_config(cfg, out)
    return out


def load_prediction(pred_dir):
    pred_dir = Path(pred_dir)
    meta = json.loads((pred_dir / "prediction.json").read_text(encoding="utf-8"))
    files = sorted(pred_dir.glob("prob_class*.npy"), key=lambda p: int(p.stem[len("prob_class"):]))
    probs = np.stack([np.load(f) for f in files], axis=-1)
    return meta, probs


def evaluate(pred_root, truth_root, group_by="none", thresholds=metrics.SWEEP_THRESHOLDS):
    """Aggregate sweep per group plus per-slide IoUs.

    Returns ``(reports, slide_ious, slide_groups)`` where ``reports`` maps
    group name to a :class:`MetricReport` (``all`` always present).
    """
    from .sampler import downsample_mask

    if group_by not in GROUP_KEYS:
        raise ConfigError(f"group_by must be one of {GROUP_KEYS}")
    truth = {}
    for row in read_corpus(truth_root):
        sdir = Path(truth_root) / row["dir"]
        f = sdir / TRUTH_FILE if (sdir / TRUTH_FILE).exists() else sdir / "mask_level0.png"
        truth[row["id"]] = (f, row)
    per_slide, slide_ious, groups = {}, {}, {}
    for pdir in sorted(p for p in Path(pred_root).iterdir() if (p / "prediction.json").exists()):
        meta, probs = load_prediction(pdir)
        sid = meta["slide_id"]
        if sid not in truth:
            raise ConfigError(f"no ground truth for {sid}")
        f, row = truth[sid]
        m = downsample_mask(load_mask(f), 2 ** meta["level"])
        if m.shape != probs.shape[:2]:
            raise ConfigError(f"{sid}: prediction {probs.shape[:2]} vs truth {m.shape}")
        per_slide[sid] = (m.classes, probs, m.annotated)
        slide_ious[sid] = report.per_slide_iou(m.classes, probs, m.annotated)
        groups[sid] = "all" if group_by == "none" else row[group_by]
    if not per_slide:
        raise ConfigError(f"no predictions under {pred_root}")
    reports = {}
    names = ["all"] + ([] if group_by == "none" else sorted(set(groups.values())))
    for g in names:
        ids = [s for s in sorted(per_slide) if g == "all" or groups[s] == g]
        acc = metrics.ConfusionAccumulator(thresholds=thresholds)
        labels, scores, valid = [], [], []
        for s in ids:
            y, p, v = per_slide[s]
            acc.update(y, p, v)
            labels.append(y.ravel())
            scores.append(p.reshape(-1, p.shape[-1]))
            valid.append(v.ravel())
        y, p, v = np.concatenate(labels), np.concatenate(scores), np.concatenate(valid)
        aucs = {c: metrics.auc(y, p[:, c], c, v) for c in acc.classes}
        reports[g] = metrics.report_from_counts(acc, aucs, group=g)
    return reports, slide_ious, groups


def cmd_eval(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, slide_ious, groups = evaluate(cfg.predictions, cfg.data_dir, cfg.group_by,
                                           np.asarray(cfg.thresholds))
    for g, rep in reports.items():
        name = "sweep.csv" if g == "all" else f"sweep_{g}.csv"
        report.atomic_write_text(out / name, rep.to_csv())
    rows = report.group_box_table(slide_ious, groups)
    report.atomic_write_text(out / "group_iou.csv", report.box_table_csv(rows))
    lines = ["slide,group,iou_tumor,iou_others"]
    lines += [f"{s},{groups[s]},{slide_ious[s][1]:.6f},{slide_ious[s][2]:.6f}" for s in sorted(slide_ious)]
    report.atomic_write_text(out / "slide_iou.csv", "\n".join(lines) + "\n")
    report.plot_curves(reports["all"], out / "plots", box_rows=rows)
    echo_config(cfg, out)
    return out


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mres-seg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON to replay; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--levels", type=int, nargs=2, dest="level_pair", metavar=("H", "L"))
        sp.add_argument("--patch-size", type=int, dest="patch_size")
        sp.add_argument("--device", choices=("cpu",))

    s = sub.add_parser("synth", help="write a synthetic slide corpus")
    common(s)
    s.add_argument("--spec", dest="spec_file", help="SynthSpec key = value file")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--annotation", choices=("full", "partial"))

    t = sub.add_parser("train", help="run the staged training protocol")
    common(t)
    t.add_argument("--data", dest="data_dir")
    t.add_argument("--val", dest="val_dir")
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--plan")
    t.add_argument("--epoch-scale", type=float, dest="epoch_scale")
    t.add_argument("--max-batches", type=int, dest="max_batches_per_epoch")

    pr = sub.add_parser("predict", help="tiled inference with heatmaps")
    common(pr)
    pr.add_argument("--checkpoint")
    pr.add_argument("--slide", dest="slide_dirs", action="append", default=None)
    pr.add_argument("--data", dest="data_dir")
    pr.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="threshold sweep, group boxes and plots")
    common(e)
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", dest="data_dir", required=True)
    e.add_argument("--group-by", dest="group_by", choices=GROUP_KEYS)
    e.add_argument("--thresholds", type=float, nargs="+")
    e.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def config_from_args(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    cfg.command = args.command
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "command":
            setattr(cfg, f.name, tuple(v) if isinstance(v, list) else v)
    if cfg.command in ("synth", "train") and cfg.seed is None:
        raise ConfigError("--seed is required")
    if cfg.command == "train":
        for k, flag in (("data_dir", "--data"), ("run_dir", "--run-dir")):
            if not getattr(cfg, k):
                raise ConfigError(f"train needs {flag}")
    if cfg.command == "predict" and not (cfg.slide_dirs or cfg.data_dir):
        raise ConfigError("predict needs --slide or --data")
    lo = cfg.level_pair
    if len(lo) != 2 or not 0 <= lo[0] < lo[1]:
        raise ConfigError(f"bad level pair {lo}")
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[cfg.command](cfg)
    except (ConfigError, SlideFormatError, FileNotFoundError, ValueError) as exc:
        print(f"mres-seg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any failure as exit code 3
        print(f"mres-seg: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
