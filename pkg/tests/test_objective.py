import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from codecmae.errors import ConfigError, NumericError, ShapeError
from codecmae.masking import MaskSpec, sample_mask
from codecmae.objective import (
    LossConfig, batch_masked_accuracy, frame_weights, masked_accuracy, weighted_ce,
    weighted_ce_from_log_probs,
)
from codecmae.rvq import CodebookWeights, TokenTargets


def random_case(rng, q=3, t=40, k=16):
    mask = sample_mask(t, rng.uniform(0.1, 0.9), int(rng.integers(1, 8)), rng)
    targets = TokenTargets(rng.integers(0, k, (q, t)), k)
    gamma = CodebookWeights(rng.dirichlet(np.ones(q)))
    return mask, targets, LossConfig(float(rng.uniform()), gamma)


def test_uniform_posteriors_give_log_k(rng):
    for _ in range(20):
        mask, targets, cfg = random_case(rng)
        probs = np.full((3, 40, 16), 1 / 16)
        assert weighted_ce(targets, probs, mask, cfg, eps=0) == pytest.approx(np.log(16), rel=1e-12)


def test_weights_sum_to_one(rng):
    mask = sample_mask(100, 0.3, 5, rng)
    w = frame_weights(torch.from_numpy(mask.flags())[None], 0.9)
    assert float(w.sum()) == pytest.approx(1.0)
    assert float(w[0, mask.masked].sum()) == pytest.approx(0.9)


def test_delta_ratio_on_masked_frame():
    # perturbing a masked frame moves the loss 9x more than an unmasked one when |M| = T - |M|
    mask = MaskSpec.from_masked(range(5), 10)
    cfg = LossConfig(0.9)
    targets = TokenTargets(np.zeros((1, 10), dtype=int), 4)
    base = np.full((1, 10, 4), 0.25)
    ref = weighted_ce(targets, base, mask, cfg, eps=0)
    a, b = base.copy(), base.copy()
    a[0, 0] = [0.5, 0.5 / 3, 0.5 / 3, 0.5 / 3]
    b[0, 7] = a[0, 0]
    da = ref - weighted_ce(targets, a, mask, cfg, eps=0)
    db = ref - weighted_ce(targets, b, mask, cfg, eps=0)
    assert da / db == pytest.approx(9.0, rel=1e-12)


def test_extreme_delta_ignores_other_side(rng):
    mask = sample_mask(30, 0.5, 3, rng)
    targets = TokenTargets(rng.integers(0, 5, (2, 30)), 5)
    probs = rng.dirichlet(np.ones(5), size=(2, 30))
    bumped = probs.copy()
    bumped[:, mask.visible] = rng.dirichlet(np.ones(5), size=(2, mask.n_visible))
    cfg1 = LossConfig(1.0)
    assert weighted_ce(targets, probs, mask, cfg1) == weighted_ce(targets, bumped, mask, cfg1)
    bumped = probs.copy()
    bumped[:, mask.masked] = rng.dirichlet(np.ones(5), size=(2, mask.n_masked))
    cfg0 = LossConfig(0.0)
    assert weighted_ce(targets, probs, mask, cfg0) == weighted_ce(targets, bumped, mask, cfg0)


def test_all_masked_drops_visible_term(rng):
    targets = TokenTargets(rng.integers(0, 4, (1, 6)), 4)
    mask = MaskSpec.from_masked(range(6), 6)
    assert weighted_ce(targets, np.full((1, 6, 4), 0.25), mask, LossConfig(0.5), eps=0) == pytest.approx(0.5 * np.log(4))


def test_one_hot_posteriors_reach_zero(rng):
    mask, targets, cfg = random_case(rng)
    probs = np.eye(16)[targets.indices]
    assert weighted_ce(targets, probs, mask, cfg) < 1e-10


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0))
def test_gamma_scaling_is_linear(seed, c):
    rng = np.random.default_rng(seed)
    mask, targets, cfg = random_case(rng)
    probs = rng.dirichlet(np.ones(16), size=(3, 40))
    base = weighted_ce(targets, probs, mask, cfg)
    g = cfg.gamma.gamma
    # unnormalised weights bypass CodebookWeights validation through the log-prob path
    lp = torch.log(torch.from_numpy(probs) + 1e-12)[None]
    y = torch.from_numpy(targets.indices)[None]
    flags = torch.from_numpy(mask.flags())[None]
    scaled = float(weighted_ce_from_log_probs(lp, y, flags, cfg.delta, c * g))
    assert scaled == pytest.approx(c * base, rel=1e-10)
    assert base >= 0


def test_errors(rng):
    targets = TokenTargets(rng.integers(0, 4, (1, 6)), 4)
    probs = np.full((1, 6, 4), 0.25)
    with pytest.raises(ConfigError):
        weighted_ce(targets, probs, MaskSpec.empty(6), LossConfig())
    with pytest.raises(ShapeError):
        weighted_ce(targets, probs[:, :5], MaskSpec.from_masked([0], 5), LossConfig())
    with pytest.raises(ShapeError):
        weighted_ce(targets, probs, MaskSpec.from_masked([0], 6), LossConfig(0.9, CodebookWeights.uniform(2)))
    bad = probs.copy()
    bad[0, :, targets.indices[0, 0]] = 0.0
    with pytest.raises(NumericError):
        weighted_ce(targets, bad, MaskSpec.from_masked([0], 6), LossConfig())
    with pytest.raises(ConfigError):
        LossConfig(delta=1.5)


def test_masked_accuracy():
    y = TokenTargets(np.array([[0, 1, 2, 3], [3, 3, 3, 3]]), 4)
    probs = np.zeros((2, 4, 4))
    probs[0, np.arange(4), [0, 1, 0, 0]] = 1
    probs[1, :, 3] = 1
    mask = MaskSpec.from_masked([1, 2, 3], 4)
    np.testing.assert_allclose(masked_accuracy(y, probs, mask), [1 / 3, 1.0])
    np.testing.assert_array_equal(masked_accuracy(y, probs, MaskSpec.empty(4)), [0.0, 0.0])


def test_batch_accuracy_pools_frames():
    logits = torch.zeros(2, 1, 3, 2)
    logits[..., 1] = 1.0
    targets = torch.tensor([[[1, 0, 1]], [[0, 0, 1]]])
    masked = torch.tensor([[True, True, False], [False, False, True]])
    np.testing.assert_allclose(batch_masked_accuracy(logits, targets, masked), [2 / 3])


def test_masked_accuracy_chance_and_one_hot(rng):
    mask = sample_mask(3000, 0.5, 15, rng)
    y = TokenTargets(rng.integers(0, 16, (4, 3000)), 16)
    acc = masked_accuracy(y, rng.dirichlet(np.ones(16), size=(4, 3000)), mask)
    # 5 sigma binomial band around 1/16
    assert np.all(np.abs(acc - 1 / 16) < 5 * np.sqrt(1 / 16 * 15 / 16 / mask.n_masked))
    np.testing.assert_array_equal(masked_accuracy(y, np.eye(16)[y.indices], mask), 1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), power=st.floats(0.2, 5.0))
def test_masked_accuracy_argmax_invariant(seed, power):
    rng = np.random.default_rng(seed)
    mask, targets, _ = random_case(rng)
    probs = rng.dirichlet(np.ones(16), size=(3, 40))
    warped = probs**power
    warped /= warped.sum(-1, keepdims=True)
    np.testing.assert_array_equal(masked_accuracy(targets, probs, mask), masked_accuracy(targets, warped, mask))
