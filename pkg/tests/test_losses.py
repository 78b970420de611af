import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mres_seg.losses import (
    DEFAULT_HEAD_WEIGHTS,
    dynamic_class_weights,
    one_hot,
    total_loss,
    weighted_ce,
    weighted_dice_loss,
)


@pytest.mark.parametrize("counts,expected", [
    ((10, 10, 10), (1.0, 1.0, 1.0)),
    ((20, 10, 10), (0.75, 1.125, 1.125)),
    ((40, 0, 0), (0.0, 1.5, 1.5)),
])
def test_dynamic_weights_examples(counts, expected):
    y = np.repeat(np.arange(3), counts)
    np.testing.assert_allclose(dynamic_class_weights(y), expected, atol=1e-12)


def test_dynamic_weights_ignores_unannotated():
    y = np.array([0, 0, 1, 2, 0, 0])
    ann = np.array([1, 1, 1, 1, 0, 0], bool)
    np.testing.assert_allclose(dynamic_class_weights(y, ann), (0.75, 1.125, 1.125))
    with pytest.raises(ValueError):
        dynamic_class_weights(y, np.zeros(6, bool))


labels = arrays(np.int64, st.integers(2, 60), elements=st.integers(0, 2))


@given(labels, st.permutations([0, 1, 2]))
def test_dynamic_weights_permutation_equivariant(y, perm):
    perm = np.array(perm)
    w = dynamic_class_weights(y)
    wp = dynamic_class_weights(perm[y])
    np.testing.assert_allclose(wp[perm], w, atol=1e-12)


@given(labels, st.integers(2, 4))
def test_dynamic_weights_duplication_invariant(y, k):
    np.testing.assert_allclose(dynamic_class_weights(np.tile(y, k)), dynamic_class_weights(y), atol=1e-12)


@given(labels)
def test_dynamic_weights_mean_one(y):
    w = dynamic_class_weights(y)
    assert abs(w.mean() - 1.0) < 1e-12 and (w >= 0).all()


def test_wce_uniform_is_ln3():
    y = one_hot(torch.randint(0, 3, (2, 5, 5)))
    p = torch.full_like(y, 1 / 3)
    assert abs(float(weighted_ce(y, p, (1, 1, 1))) - math.log(3)) < 1e-6


def test_wce_hand_sum():
    rng = np.random.default_rng(0)
    yi = rng.integers(0, 3, (1, 4, 4))
    p = rng.dirichlet(np.ones(3), size=(1, 4, 4))  # (1,4,4,3)
    valid = rng.random((1, 4, 4)) < 0.7
    w = np.array([0.3, 1.2, 1.5])
    expected = np.mean([-w[yi[0, i, j]] * np.log(p[0, i, j, yi[0, i, j]])
                        for i in range(4) for j in range(4) if valid[0, i, j]])
    got = weighted_ce(one_hot(yi, dtype=torch.float64), torch.from_numpy(p).permute(0, 3, 1, 2),
                      w, torch.from_numpy(valid))
    assert abs(float(got) - expected) < 1e-12


def test_wce_clip_and_shape():
    y = one_hot(torch.zeros(1, 2, 2, dtype=torch.long))
    p = torch.zeros_like(y)
    assert math.isfinite(float(weighted_ce(y, p, (1, 1, 1))))
    with pytest.raises(ValueError):
        weighted_ce(y, p[:, :2], (1, 1, 1))


def test_dice_hand_sum():
    rng = np.random.default_rng(1)
    yi = rng.integers(0, 3, (2, 3, 3))
    p = rng.dirichlet(np.ones(3), size=(2, 3, 3))
    w = np.array([0.5, 1.0, 1.5])
    y = np.eye(3)[yi]
    terms = []
    for c in range(3):
        inter = (y[..., c] * p[..., c]).sum()
        terms.append(w[c] * (1 - 2 * inter / (y[..., c].sum() + p[..., c].sum() + 1e-6)))
    got = weighted_dice_loss(torch.from_numpy(y).permute(0, 3, 1, 2),
                             torch.from_numpy(p).permute(0, 3, 1, 2), w)
    assert abs(float(got) - sum(terms) / 3) < 1e-12


def test_dice_perfect_and_disjoint():
    yi = torch.tensor([[[0, 1], [2, 0]]])
    y = one_hot(yi, dtype=torch.float64)
    w = (0.4, 1.1, 1.5)
    assert float(weighted_dice_loss(y, y.clone(), w)) <= 1e-5
    wrong = one_hot((yi + 1) % 3, dtype=torch.float64)
    assert abs(float(weighted_dice_loss(y, wrong, w)) - np.mean(w)) < 1e-9


def test_total_loss_selector_and_linearity():
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    per = {"high": (t(1.0), t(2.0)), "low": (t(3.0), t(4.0)), "fused": (t(5.0), t(6.0))}
    assert float(total_loss(per, (0, 0, 1))) == 11.0
    assert float(total_loss(per, (1, 0, 0))) == 3.0
    a, b = (0.2, 0.7, 0.1), (1.0, 0.5, 2.0)
    lin = float(total_loss(per, tuple(2 * x + 3 * y for x, y in zip(a, b))))
    assert abs(lin - (2 * float(total_loss(per, a)) + 3 * float(total_loss(per, b)))) < 1e-9
    assert float(total_loss(per)) == pytest.approx(0.5 * 3 + 0.5 * 7 + 11)


@settings(max_examples=30)
@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.lists(st.floats(0, 10), min_size=6, max_size=6))
def test_total_loss_dot_product(wts, vals):
    per = {h: (torch.tensor(vals[2 * i], dtype=torch.float64), torch.tensor(vals[2 * i + 1], dtype=torch.float64))
           for i, h in enumerate(("high", "low", "fused"))}
    expected = sum(w * (vals[2 * i] + vals[2 * i + 1]) for i, w in enumerate(wts))
    assert float(total_loss(per, tuple(wts))) == pytest.approx(expected, abs=1e-9)


def _composite(logits, y, valid, w):
    p = torch.softmax(logits, 1)
    return weighted_ce(y, p, w, valid) + weighted_dice_loss(y, p, w, valid)


def test_gradient_matches_finite_difference():
    torch.manual_seed(0)
    logits = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    y = one_hot(torch.randint(0, 3, (1, 4, 4)), dtype=torch.float64)
    valid = torch.rand(1, 4, 4) < 0.8
    w = (0.6, 1.1, 1.3)
    assert torch.autograd.gradcheck(lambda z: _composite(z, y, valid, w), (logits,), eps=1e-6, atol=1e-4)


def test_gradient_through_two_layer_net():
    torch.manual_seed(1)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 6, 1), torch.nn.ReLU(), torch.nn.Conv2d(6, 3, 1)).double()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    y = one_hot(torch.randint(0, 3, (1, 4, 4)), dtype=torch.float64)
    w = (1.0, 1.0, 1.0)
    params = tuple(net.parameters())

    def f(*ps):
        h = torch.nn.functional.conv2d(x, ps[0], ps[1]).relu()
        return _composite(torch.nn.functional.conv2d(h, ps[2], ps[3]), y, None, w)

    assert torch.autograd.gradcheck(f, tuple(p.detach().requires_grad_(True) for p in params),
                                    eps=1e-6, atol=1e-4)


def test_loss_descends():
    torch.manual_seed(2)
    logits = torch.zeros(2, 3, 8, 8, requires_grad=True)
    yi = torch.randint(0, 3, (2, 8, 8))
    y = one_hot(yi)
    w = dynamic_class_weights(yi.numpy())
    opt = torch.optim.SGD([logits], lr=1.0)
    hist = []
    for _ in range(100):
        opt.zero_grad()
        loss = _composite(logits, y, None, w)
        loss.backward()
        opt.step()
        hist.append(float(loss.detach()))
    assert all(b <= a + 1e-6 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < 0.8 * hist[0]


def test_default_head_weights():
    assert DEFAULT_HEAD_WEIGHTS == (0.5, 0.5, 1.0)
