import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from behaviorkit.dmin import (DEFAULT_OFFSETS, BinaryDiscriminator, DminConfig, DminRewarder,
                              TargetDistribution, arena_min_logdensity, discriminator_loss_grad,
                              dmin_reward, input_gradient_penalty, sample_target, target_logdensity,
                              train_discriminator)
from behaviorkit.neural import MlpParams, init_mlp, mlp_grad

LOG4 = math.log(4.0)


def test_transforms_at_half():
    for off in (0.0, 3.0):
        np.testing.assert_allclose(dmin_reward("GAIL", 0.0, offset=off), math.log(0.5) + off, rtol=1e-15)
        np.testing.assert_allclose(dmin_reward("AIRL", 0.0, offset=off), off)
        np.testing.assert_allclose(dmin_reward("GAIL2", 0.0, offset=off), math.log(2.0) + off, rtol=1e-15)


def test_airl_equals_log_odds():
    l = np.random.default_rng(0).uniform(-10, 10, 1000)
    d = 1.0 / (1.0 + np.exp(-l))
    np.testing.assert_allclose(dmin_reward("AIRL", l), np.log(d) - np.log(1.0 - d), rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(l=st.floats(-10, 10))
def test_log_sigmoid_identity(l):
    gail = dmin_reward("GAIL", l)
    neg = dmin_reward("GAIL", -l)
    assert abs((gail - neg) - l) <= 1e-12 * max(1.0, abs(l))


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-30, 30), b=st.floats(-30, 30))
def test_transforms_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    for t in ("GAIL", "GAIL2", "AIRL"):
        assert dmin_reward(t, lo) <= dmin_reward(t, hi)


def test_logit_clamp_bounds_gail():
    r = dmin_reward("GAIL", np.array([-1e6, 1e6]), offset=10.0)
    assert r[0] >= -10.00005 + 10.0 - 1e-12 and r[1] <= 10.0
    np.testing.assert_array_equal(dmin_reward("AIRL", np.array([-50.0, 50.0])), [-10.0, 10.0])


def test_mle_reward_bimodal_example():
    t = TargetDistribution((0.5, 0.5), ((-2.0, 0.0), (2.0, 0.0)), 1.0)
    ld = target_logdensity(t, np.array([[2.0, 0.0]]))
    expected = math.log(0.5 / (2 * math.pi) * (1 + math.exp(-8)))
    np.testing.assert_allclose(ld, expected, rtol=1e-14)
    # the rounded figure -2.5310 ignores the exp(-8) cross term (+3.4e-4)
    np.testing.assert_allclose(expected, -2.5310, atol=5e-4)
    np.testing.assert_allclose(dmin_reward("MLE", target_logdensity_at_s=ld, offset=1.0), expected + 1.0)
    with pytest.raises(ValueError):
        dmin_reward("MLE", logit=0.0)
    with pytest.raises(ValueError):
        dmin_reward("JS", 0.0)


def test_target_logdensity_examples():
    unit = TargetDistribution((1.0,), ((0.0, 0.0),), 1.0)
    np.testing.assert_allclose(target_logdensity(unit, np.zeros(2)), -math.log(2 * math.pi), rtol=1e-15)
    far = target_logdensity(unit, np.array([100.0, 0.0]))
    assert np.isfinite(far)
    np.testing.assert_allclose(far, -5000 - math.log(2 * math.pi))
    sym = TargetDistribution.bimodal(2.0, 0.5)
    x = np.random.default_rng(0).normal(size=(10, 2))
    np.testing.assert_allclose(target_logdensity(sym, x), target_logdensity(sym, x * [-1, 1]), rtol=1e-12)


def test_target_logdensity_integrates_to_one():
    t = TargetDistribution((0.3, 0.7), ((-1.0, 0.5), (1.5, -0.5)), 0.6)
    g = np.linspace(-6, 6, 601)
    xx, yy = np.meshgrid(g, g)
    dens = np.exp(target_logdensity(t, np.stack([xx.ravel(), yy.ravel()], 1)))
    np.testing.assert_allclose(dens.sum() * (g[1] - g[0]) ** 2, 1.0, rtol=1e-6)


def test_sample_target():
    rng = np.random.default_rng(0)
    one = TargetDistribution((1.0,), ((1.0, -2.0),), 0.5)
    n = 20_000
    x = sample_target(one, n, rng)
    assert np.all(np.abs(x.mean(axis=0) - [1.0, -2.0]) <= 4 * 0.5 / math.sqrt(n))
    first = TargetDistribution((1.0, 0.0), ((5.0, 5.0), (-5.0, -5.0)), 0.1)
    assert np.all(sample_target(first, 500, rng)[:, 0] > 4)
    np.testing.assert_array_equal(sample_target(one, 5, np.random.default_rng(3)),
                                  sample_target(one, 5, np.random.default_rng(3)))
    with pytest.raises(ValueError):
        sample_target(one, 0, rng)


def test_target_validation():
    with pytest.raises(ValueError):
        TargetDistribution((0.5, 0.4), ((0, 0), (1, 1)), 1.0)
    with pytest.raises(ValueError):
        TargetDistribution((1.0,), ((0, 0),), 0.0)
    with pytest.raises(ValueError):
        TargetDistribution((), (), 1.0)


def test_matched_batches_converge_to_log4():
    rng = np.random.default_rng(0)
    disc = BinaryDiscriminator.create(2, rng)
    x = rng.normal(size=(256, 2))
    for _ in range(300):
        disc, loss = train_discriminator(disc, x, x, 1e-3)
    assert abs(loss - LOG4) < 0.05
    assert loss >= LOG4 - 1e-9


def test_separable_batches_drive_loss_to_zero():
    rng = np.random.default_rng(1)
    disc = BinaryDiscriminator.create(2, rng)
    for _ in range(500):
        p = rng.normal(size=(128, 2)) + [-3, 0]
        t = rng.normal(size=(128, 2)) * 0.5 + [3, 0]
        disc, loss = train_discriminator(disc, p, t, 1e-2)
    assert loss < 0.1


def test_zero_penalty_weight_is_exactly_zero(rng):
    disc = BinaryDiscriminator.create(2, rng)
    _, _, parts = discriminator_loss_grad(disc, rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), rng)
    assert parts["gradient_penalty"] == 0.0


def test_penalty_zero_for_constant_logit(rng):
    p = init_mlp([2, 4, 1], rng, dtype=np.float64)
    p = p.with_arrays([np.zeros_like(a) if i == len(p.arrays()) - 2 else a for i, a in enumerate(p.arrays())])
    pen, _ = input_gradient_penalty(p, rng.normal(size=(5, 2)))
    assert pen == 0.0


def test_penalty_value_matches_input_gradient(rng):
    p = init_mlp([3, 6, 5, 1], rng, dtype=np.float64)
    x = rng.normal(size=(7, 3))
    pen, _ = input_gradient_penalty(p, x)
    _, gx = mlp_grad(p, x, np.ones((7, 1)))
    np.testing.assert_allclose(pen, np.mean(np.sum(gx ** 2, axis=1)), rtol=1e-12)
    assert pen >= 0


@pytest.mark.parametrize("sizes", [[2, 5, 1], [3, 6, 5, 1], [2, 4, 4, 4, 1]])
def test_penalty_parameter_gradient_matches_fd(sizes):
    rng = np.random.default_rng(len(sizes))
    p = init_mlp(sizes, rng, dtype=np.float64)
    p = p.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in p.arrays()])
    x = rng.normal(size=(6, sizes[0]))
    _, grads = input_gradient_penalty(p, x)
    arrays = [a.copy() for a in p.arrays()]
    h = 1e-6
    for k, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = input_gradient_penalty(p.with_arrays(arrays), x)[0]
            a[idx] = old - h
            fm = input_gradient_penalty(p.with_arrays(arrays), x)[0]
            a[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grads[k], fd, rtol=1e-5, atol=1e-9)


def test_bce_gradient_matches_fd(rng):
    disc = BinaryDiscriminator.create(2, rng, dtype=np.float64)
    px, tx = rng.normal(size=(9, 2)), rng.normal(size=(7, 2)) + 1
    _, grads, _ = discriminator_loss_grad(disc, px, tx)
    arrays = [a.copy() for a in disc.params.arrays()]
    h = 1e-6
    for k, a in enumerate(arrays):
        idx = (0,) * a.ndim
        old = a[idx]
        a[idx] = old + h
        fp = discriminator_loss_grad(BinaryDiscriminator(disc.params.with_arrays(arrays)), px, tx)[0]
        a[idx] = old - h
        fm = discriminator_loss_grad(BinaryDiscriminator(disc.params.with_arrays(arrays)), px, tx)[0]
        a[idx] = old
        np.testing.assert_allclose(grads[k][idx], (fp - fm) / (2 * h), rtol=1e-5, atol=1e-9)


def test_empty_batches_rejected(rng):
    disc = BinaryDiscriminator.create(2, rng)
    with pytest.raises(ValueError):
        discriminator_loss_grad(disc, np.zeros((0, 2)), np.zeros((3, 2)))


def test_default_offsets_and_mle_offset():
    assert DminConfig().resolved_offset() == DEFAULT_OFFSETS["GAIL"] == 10.0
    assert DminConfig(transform="GAIL2").resolved_offset() == 0.0
    assert DminConfig(transform="AIRL").resolved_offset() == 10.0
    cfg = DminConfig(transform="MLE")
    t = cfg.target_distribution()
    np.testing.assert_allclose(cfg.resolved_offset(), -arena_min_logdensity(t, 5.0))
    # the MLE reward is non-negative everywhere on the arena grid
    g = np.linspace(-5, 5, 101)
    xx, yy = np.meshgrid(g, g)
    r = dmin_reward("MLE", target_logdensity_at_s=target_logdensity(t, np.stack([xx.ravel(), yy.ravel()], 1)),
                    offset=cfg.resolved_offset())
    assert r.min() >= -1e-9
    with pytest.raises(ValueError):
        DminConfig(transform="FAIRL")
    with pytest.raises(ValueError):
        DminConfig(gradient_penalty_weight=-1)


def test_rewarder_and_update(rng):
    rw = DminRewarder(DminConfig(obs_indices=(0, 1), minibatch_size=64), 4, rng)
    f = rng.normal(size=(256, 2))
    r = rw(f, None, np.zeros(256))
    assert r.shape == (256,) and np.all(r <= 10.0)
    stats = rw.update(f, rng)
    assert "discriminator_loss" in stats
    mle = DminRewarder(DminConfig(transform="MLE", obs_indices=(0, 1)), 4, rng)
    assert mle.update(f, rng) == {}
    with pytest.raises(ValueError):
        DminRewarder(DminConfig(obs_indices=(0,)), 4, rng)
