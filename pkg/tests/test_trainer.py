import dataclasses

import numpy as np
import pytest
import torch

from mres_seg import trainer as T
from mres_seg.network import build_network
from mres_seg.pyramid import LabelMask, SynthSpec, partial_annotation, synth_slide
from mres_seg.sampler import SlideData

DESK = T.TrainConfig(patch_size=64, max_batches_per_epoch=3)


def test_lr_schedule_table():
    # (epoch, fraction) -> multiple of lr0
    table = [((0, 0.0), 1.0), ((0, 0.5), 1 - 0.9 * 0.25), ((1, 0.0), 0.55), ((1, 0.99), 1 - 0.9 * 0.995),
             ((2, 0.0), 0.5), ((3, 0.0), 0.5 * 0.55), ((4, 0.0), 0.25), ((5, 0.5), 0.25 * (1 - 0.9 * 0.75))]
    for (ep, u), mult in table:
        assert T.lr_schedule(ep, u, 0.01) == pytest.approx(0.01 * mult, rel=1e-12)


def test_lr_schedule_monotone_within_cycle():
    xs = [T.lr_schedule(e, b / 10, 1.0) for e in (0, 1) for b in range(10)]
    assert all(b < a for a, b in zip(xs, xs[1:]))
    assert T.lr_schedule(2, 0.0, 1.0) > xs[-1]


def test_default_plan_constants():
    plans = T.load_plans(T.default_plan_path())
    assert [p.name for p in plans] == ["base"] + [f"master-{i}" for i in range(1, 6)]
    assert [p.threshold for p in plans] == [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    assert [p.lr0 for p in plans] == [0.01, 0.005, 0.001, 0.0007, 0.0005, 0.0001]
    assert [p.epochs for p in plans] == [20, 5, 5, 5, 5, 10]
    assert [p.encoder_scale for p in plans] == ["small"] + ["large"] * 5
    assert [p.dataset for p in plans] == ["annotated_only"] + ["full_set"] * 5
    assert [p.weight_mode for p in plans] == ["static", "dynamic", "dynamic", "dynamic", "dynamic", "static"]
    assert plans[-1].static_weights == (1.0, 1.5, 1.0)
    assert set(plans[3].augments) == {"targeted_hsv", "basic_geometric", "heavy_color", "noise_blur"}
    assert "xy_jitter" in plans[5].augments and "style_infuse" in plans[4].augments
    assert all(p.batch_size == 16 for p in plans)
    assert plans[0].architecture == "unet" and all(p.architecture == "m-unet" for p in plans[1:])


def test_plan_text_roundtrip(tmp_path):
    plans = T.load_plans(T.default_plan_path())
    T.write_plans(plans, tmp_path / "p.plan")
    assert T.load_plans(tmp_path / "p.plan") == plans


@pytest.mark.parametrize("text,msg", [
    ("name = a\nencoder_scale = small\n", "missing"),
    ("name = a\nbogus = 1\n", "unknown"),
    ("name = a\nname = b\n", "duplicate"),
    ("name = a\nencoder_scale = tiny\ndataset = full_set\naugments = noise_blur\nthreshold = 0.5\n"
     "epochs = 1\nlr0 = 0.1\n", "encoder_scale"),
    ("name = a\nencoder_scale = small\ndataset = full_set\naugments = warp\nthreshold = 0.5\n"
     "epochs = 1\nlr0 = 0.1\n", "warp"),
    ("name = a\nencoder_scale = small\ndataset = full_set\naugments = noise_blur\nthreshold = 1.5\n"
     "epochs = 1\nlr0 = 0.1\n", "threshold"),
    ("just text\n", "expected"),
])
def test_plan_parse_errors(text, msg):
    with pytest.raises(ValueError, match=msg):
        T.parse_plans(text)


def test_epoch_scale_and_budget():
    plan = T.StagePlan("x", "small", "full_set", ("noise_blur",), 0.5, 5, 0.01)
    assert T.TrainConfig(epoch_scale=0.5).stage_epochs(plan) == 3
    assert T.TrainConfig().stage_epochs(dataclasses.replace(plan, epochs=0)) == 0
    dual = T.network_config(plan, DESK)
    single = T.equal_budget_single(dual)
    assert not single.dual
    assert build_network(single).parameter_count() >= build_network(dual).parameter_count()


def _plan(**kw):
    base = dict(name="t", encoder_scale="small", dataset="annotated_only", augments=("basic_geometric",),
                threshold=0.9, epochs=1, lr0=0.01, weight_mode="dynamic")
    base.update(kw)
    return T.StagePlan(**base)


def test_zero_epochs_leaves_model(small_corpus):
    pool = T.build_pool(small_corpus, DESK)
    net = build_network(T.network_config(_plan(), DESK))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    net, rec = T.train_stage(net, small_corpus, pool, _plan(epochs=0), 0, DESK)
    assert rec.epochs == []
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())


def test_same_seed_same_weights(small_corpus):
    pool = T.build_pool(small_corpus, DESK)
    plan = _plan(augments=("basic_geometric", "color_jitter", "noise_blur"))
    out = []
    for _ in range(2):
        net = build_network(T.network_config(plan, DESK, seed=1))
        net, rec = T.train_stage(net, small_corpus, pool, plan, 5, DESK)
        out.append((net.state_dict(), rec.epochs[0]["loss"]))
    assert out[0][1] == out[1][1]
    assert all(torch.equal(out[0][0][k], out[1][0][k]) for k in out[0][0])


def test_training_reduces_loss(trained_small):
    _, rec, _ = trained_small
    losses = [e["loss"] for e in rec.epochs]
    assert len(losses) == 6 and np.isfinite(losses).all()
    assert losses[-1] < losses[0]
    for e in rec.epochs:
        assert {"loss", "accuracy", "mean_iou"} <= set(e)


def test_nonfinite_loss_raises(small_corpus):
    pool = T.build_pool(small_corpus, DESK)
    net = build_network(T.network_config(_plan(), DESK))
    with pytest.raises(T.NonFiniteLossError):
        T.train_stage(net, small_corpus, pool, _plan(lr0=1e30), 0, DESK)


def test_labels_from_probs_rules():
    probs = np.zeros((2, 2, 3), np.float32)
    probs[0, 0] = (0.1, 0.85, 0.05)
    probs[0, 1] = (0.5, 0.3, 0.2)
    probs[1, 0] = (0.0, 0.05, 0.95)
    probs[1, 1] = (0.9, 0.05, 0.05)
    human = LabelMask(np.zeros((4, 4), np.uint8), np.zeros((4, 4), bool), 0)
    human.classes[3, 3] = 1
    human.annotated[3, 3] = True
    out = T.labels_from_probs(probs, 0.8, human, 1)
    assert out.classes[0, 0] == 1 and out.annotated[0, 0]
    assert not out.annotated[0, 2]
    assert out.classes[2, 0] == 2
    assert out.classes[3, 3] == 1 and out.classes[2, 2] == 0


def test_pseudo_label_threshold_behaviour(trained_small):
    net, _, cfg = trained_small
    s, m = synth_slide(SynthSpec(seed=301))
    human = partial_annotation(m, n_regions=2, seed=1)
    corpus = {s.id: SlideData(s, human)}
    cov = {}
    for thr in (1.0, 0.9, 0.6, 0.4):
        lab = T.pseudo_label(net, corpus, thr)[s.id]
        assert np.array_equal(lab.classes[human.annotated], human.classes[human.annotated])
        assert lab.annotated[human.annotated].all()
        cov[thr] = lab.coverage()
    assert cov[1.0] - human.coverage() < 0.01
    assert cov[1.0] <= cov[0.9] <= cov[0.6] <= cov[0.4]
    assert cov[0.4] > human.coverage()


def test_multi_step_pipeline(tmp_path, small_corpus):
    corpus = {sid: d.with_mask(partial_annotation(d.mask, n_regions=3, seed=2))
              for sid, d in list(small_corpus.items())[:2]}
    plans = [
        _plan(name="base", architecture="unet", weight_mode="static", threshold=0.9),
        _plan(name="m1", dataset="full_set", threshold=0.7,
              augments=("basic_geometric", "noise_blur", "xy_jitter")),
    ]
    cfg = dataclasses.replace(DESK, max_batches_per_epoch=2)
    logs = []
    model, run = T.multi_step_train(corpus, plans, 0, cfg, run_dir=tmp_path / "run", log=logs.append)
    assert [s.name for s in run.stages] == ["base", "m1"]
    assert run.stages[1].label_threshold == 0.9  # parent's threshold
    human_cov = np.mean([d.mask.coverage() for d in corpus.values()])
    assert run.stages[1].coverage >= human_cov
    for k in (0, 1):
        assert (tmp_path / "run" / f"stage_{k}" / "done").exists()
    assert len(list((tmp_path / "run" / "stage_1" / "labels").glob("*.png"))) == 2
    assert model.config.dual
    # restart reuses finished stages
    logs2 = []
    _, run2 = T.multi_step_train(corpus, plans, 0, cfg, run_dir=tmp_path / "run", log=logs2.append)
    assert sum("reused" in m for m in logs2) == 2
    assert [s.name for s in run2.stages] == ["base", "m1"]
    log_text = (tmp_path / "run" / "train.log").read_text()
    assert log_text.count("reused") == 2 and "epoch 0" in log_text


def test_base_only_pipeline(small_corpus):
    sid = sorted(small_corpus)[0]
    model, run = T.multi_step_train({sid: small_corpus[sid]}, [_plan(architecture="unet")], 3,
                                    dataclasses.replace(DESK, max_batches_per_epoch=1))
    assert not model.config.dual and len(run.stages) == 1
    assert run.stages[0].label_threshold is None


def test_tile_centers_cover():
    cs = T.tile_centers(200, 64, 32, 1)
    assert cs[0] - 32 <= 0 and cs[-1] + 32 >= 200


def test_predict_slide_probabilities(trained_small, slide7):
    net, _, _ = trained_small
    p = T.predict_slide(net, slide7[0])
    assert p.shape == (640, 640, 3) and p.dtype == np.float32
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-4)


def test_lr_schedule_closed_form_lr0_small():
    for ep in range(6):
        for u in (0.0, 0.25, 0.5, 0.75):
            k, within = divmod(ep, 2)
            expected = 0.001 * 0.5**k * (1 - 0.9 * (within + u) / 2)
            assert T.lr_schedule(ep, u, 0.001) == expected


def test_descent_on_twenty_patch_pool(small_corpus):
    pool = T.build_pool(small_corpus, DESK)
    rng = np.random.default_rng(0)
    pick = []
    for c, n in ((1, 10), (0, 5), (2, 5)):
        cand = [d for d in pool if d.patch_class == c]
        pick += [cand[i] for i in rng.choice(len(cand), n, replace=False)]
    cfg = dataclasses.replace(DESK, batch_size=8, max_batches_per_epoch=None)
    plan = _plan(epochs=10, weight_mode="static")
    net = build_network(T.network_config(plan, cfg, seed=0))
    _, rec = T.train_stage(net, small_corpus, pick, plan, 0, cfg)
    assert len(rec.epochs) == 10
    assert rec.epochs[-1]["last_loss"] < rec.epochs[0]["first_loss"]
    assert rec.lr_trace[0] == plan.lr0 and rec.weight_trace[0] == [1.0, 1.0, 1.0]


def test_pseudo_labels_agree_with_truth(trained_small):
    net, _, _ = trained_small
    s, m = synth_slide(SynthSpec(seed=302))
    human = partial_annotation(m, n_regions=2, seed=3)
    lab = T.pseudo_label(net, {s.id: SlideData(s, human)}, 0.9)[s.id]
    new = lab.annotated & ~human.annotated
    assert new.sum() > 0
    assert (lab.classes[new] == m.classes[new]).mean() >= 0.9


def test_repeat_run_same_checkpoint_hash(tmp_path, small_corpus):
    sid = sorted(small_corpus)[1]
    cfg = dataclasses.replace(DESK, max_batches_per_epoch=2)
    hashes = []
    for k in range(2):
        T.multi_step_train({sid: small_corpus[sid]}, [_plan(architecture="unet")], 9, cfg,
                           run_dir=tmp_path / f"r{k}")
        hashes.append((tmp_path / f"r{k}" / "stage_0" / "done").read_text())
    assert hashes[0] == hashes[1]
