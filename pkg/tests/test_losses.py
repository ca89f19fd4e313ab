import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from herdmetric import losses
from herdmetric.losses import LossConfig
from conftest import central_diff, max_rel_err

CFG = LossConfig(margin=1.0, lam=0.01, epsilon=1e-8)


def pts_at(dap, dan, dim=3):
    """Anchor at the origin, positive and negative on two axes at the given distances."""
    a = np.zeros(dim)
    p = np.zeros(dim)
    p[0] = dap
    n = np.zeros(dim)
    n[1] = dan
    return a, p, n


def test_contrastive_examples():
    x = np.array([0.3, -1.0])
    assert losses.contrastive(x, x, 0, CFG) == 0.0
    a, b = np.zeros(2), np.array([1.5, 0.0])
    assert losses.contrastive(a, b, 1, CFG) == 0.0
    a, b = np.zeros(2), np.array([0.0, 2.0])
    assert losses.contrastive(a, b, 0, CFG) == pytest.approx(1.0, abs=1e-12)
    b = np.array([0.5, 0.0])
    assert losses.contrastive(a, b, 1, CFG) == pytest.approx(0.25, abs=1e-12)


def test_triplet_examples():
    assert losses.triplet(*pts_at(1.0, 2.0), CFG) == 0.0
    assert losses.triplet(*pts_at(1.0, 1.5), CFG) == pytest.approx(0.5, abs=1e-12)
    a = np.array([1.0, 1.0])
    assert losses.triplet(a, a, np.array([3.0, 1.0]), CFG) == 0.0


def test_reciprocal_triplet_examples():
    assert losses.reciprocal_triplet(*pts_at(1.0, 2.0), CFG) == pytest.approx(1.5, abs=1e-7)
    assert losses.reciprocal_triplet(*pts_at(0.0, 1e12), CFG) == pytest.approx(0.0, abs=1e-11)
    a, p, _ = pts_at(0.7, 1.0)
    v = losses.reciprocal_triplet(a, p, a, CFG)
    assert math.isfinite(v)
    assert v == pytest.approx(0.7 + 1 / CFG.epsilon)


def test_softmax_ce_examples():
    assert losses.softmax_ce([0.0, 0.0], 0) == pytest.approx(math.log(2), abs=1e-12)
    assert losses.softmax_ce([100.0, 0.0, 0.0], 0) == pytest.approx(0.0, abs=1e-40)
    assert losses.softmax_ce([2.0] * 7, 3) == pytest.approx(math.log(7), abs=1e-12)
    with pytest.raises(IndexError):
        losses.softmax_ce([0.0, 0.0], 2)


def test_combined_examples():
    assert losses.combined("TL", 0.6931, 1.5, LossConfig(lam=0.0)) == 0.6931
    assert losses.combined("RTL", 0.6931, 1.5, LossConfig(lam=0.01)) == pytest.approx(0.7081, abs=1e-12)
    assert losses.combined("RTL", 0.6931, 0.0, CFG) == 0.6931
    with pytest.raises(ValueError):
        losses.combined("XX", 0.0, 0.0, CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(margin=0)
    with pytest.raises(ValueError):
        LossConfig(lam=-1)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0)


vecs = arrays(np.float64, (3, 4), elements=st.floats(-10, 10, allow_nan=False))


@given(vecs, st.integers(0, 1))
def test_losses_non_negative(v, y):
    a, p, n = v
    assert losses.contrastive(a, p, y, CFG) >= 0
    assert losses.triplet(a, p, n, CFG) >= 0
    assert losses.reciprocal_triplet(a, p, n, CFG) >= 0
    assert losses.softmax_ce(a, 1) >= 0


@given(vecs, arrays(np.float64, 4, elements=st.floats(-10, 10, allow_nan=False)))
def test_triplet_translation_invariant(v, shift):
    a, p, n = v
    # exact when the shift keeps every coordinate exactly representable
    shift = np.round(shift)
    a, p, n = np.round(a * 8) / 8, np.round(p * 8) / 8, np.round(n * 8) / 8
    assert losses.triplet(a + shift, p + shift, n + shift, CFG) == losses.triplet(a, p, n, CFG)


def test_rtl_monotone_in_distances():
    grid = np.linspace(0.1, 5.0, 25)
    for dap in grid:
        vals = [losses.reciprocal_triplet(*pts_at(dap, dan), CFG) for dan in grid]
        assert np.all(np.diff(vals) < 0)
    for dan in grid:
        vals = [losses.reciprocal_triplet(*pts_at(dap, dan), CFG) for dap in grid]
        assert np.all(np.diff(vals) > 0)


def test_combined_within_lambda_of_softmax():
    s, m = 0.9, 3.2
    assert losses.combined("TL", s, m, CFG) - s == pytest.approx(CFG.lam * m, abs=1e-15)


def _fd_check_triplet(fn_grad, fn, a, p, n):
    v, ga, gp, gn = fn_grad(a, p, n, CFG)
    assert v == fn(a, p, n, CFG)
    for idx, g in enumerate((ga, gp, gn)):
        def f(x, idx=idx):
            args = [a, p, n]
            args[idx] = x
            return fn(*args, CFG)
        assert max_rel_err(g, central_diff(f, [a, p, n][idx])) <= 1e-4


def test_gradients_match_finite_differences(rng):
    checked = 0
    while checked < 100:
        a, p, n = rng.normal(size=(3, 6))
        dap, dan = np.linalg.norm(a - p), np.linalg.norm(a - n)
        if abs(dap - dan + CFG.margin) < 1e-3 or dan < 1e-3:
            continue
        _fd_check_triplet(losses.triplet_grad, losses.triplet, a, p, n)
        _fd_check_triplet(losses.reciprocal_triplet_grad, losses.reciprocal_triplet, a, p, n)
        for y in (0, 1):
            if abs(dap - CFG.margin) < 1e-3:
                continue
            v, g1, g2 = losses.contrastive_grad(a, p, y, CFG)
            assert max_rel_err(g1, central_diff(lambda x: losses.contrastive(x, p, y, CFG), a)) <= 1e-4
            assert max_rel_err(g2, central_diff(lambda x: losses.contrastive(a, x, y, CFG), p)) <= 1e-4
        logits = rng.normal(size=5) * 3
        v, g = losses.softmax_ce_grad(logits, 2)
        assert max_rel_err(g, central_diff(lambda z: losses.softmax_ce(z, 2), logits)) <= 1e-4
        checked += 1


def test_inactive_hinge_has_zero_gradient():
    v, ga, gp, gn = losses.triplet_grad(*pts_at(0.5, 3.0), CFG)
    assert v == 0.0
    assert not ga.any() and not gp.any() and not gn.any()


def test_batch_softmax_ce_matches_scalar(rng):
    logits = rng.normal(size=(6, 4))
    t = np.array([0, 1, 2, 3, 0, 1])
    v, g = losses.batch_softmax_ce(logits, t)
    assert v == pytest.approx(np.mean([losses.softmax_ce(z, c) for z, c in zip(logits, t)]))
    f = lambda z: losses.batch_softmax_ce(z, t)[0]
    assert max_rel_err(g, central_diff(f, logits)) <= 1e-4
