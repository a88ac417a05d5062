import json
import math

import numpy as np
import pytest
from scipy.special import expit, log_expit

from fpo.errors import ConfigError, LengthError, ShapeError
from fpo.generators import alpha_divergence, default_generators, forward_kl, reverse_kl
from fpo.losses import (
    KSampleBatch,
    LossConfig,
    PairwiseBatch,
    dpo_as_fpo_config,
    dpo_loss,
    exo_loss,
    fpo_loss,
    fpo_loss_general,
    fpo_loss_pairwise_reward,
    fpo_loss_pairwise_smoothed,
    loss_gradient_check,
    simpo_style_delta,
)
from fpo.policy import TabularPolicy, exact_f_divergence

GENS = default_generators()
IDS = [str(g) for g in GENS]

# 40-digit mpmath evaluations
RKL_PAIR_DELTA1_DR2 = 0.06713075445313278
EXO_DELTA2 = 0.45897199655150725
FKL_K3 = 0.27488721956224652
SOFTPLUS_M1 = 0.31326168751822283


def pair(delta, beta=1.0, rewards=None):
    """Single-record instance with margin ``delta``."""
    pol = TabularPolicy([[delta / beta, 0.0]])
    ref = TabularPolicy([[0.0, 0.0]])
    return pol, ref, PairwiseBatch.from_records([(0, 0, 1)], rewards=rewards)


def k_instance(log_v, log_w):
    """One record whose v and w are the given distributions (beta = 1, flat ref)."""
    pol = TabularPolicy([log_v])
    ref = TabularPolicy([np.zeros(len(log_v))])
    batch = KSampleBatch([0], [list(range(len(log_v)))], [log_w])
    return pol, ref, batch


# ----------------------------------------------------------------------------
# examples


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_general_zero_when_g_matches_reward(gen, rng):
    ref = TabularPolicy(rng.normal(size=(2, 5)))
    r = rng.uniform(-2, 2, size=(2, 5))
    beta = 0.5
    pol = ref.with_logits(ref.logits + r / beta + rng.normal(size=(2, 1)))
    batch = KSampleBatch([0, 1], [[0, 2, 4], [1, 3, 0]], [r[0, [0, 2, 4]], r[1, [1, 3, 0]]])
    lv = fpo_loss_general(LossConfig(gen, beta=beta, variant="general_k"), pol, ref, batch)
    assert abs(lv.loss) < 1e-12
    assert np.max(np.abs(lv.gradient)) < 1e-8


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_general_k2_equals_pairwise_reward(gen, rng):
    pol = TabularPolicy(rng.normal(size=(1, 4)))
    ref = TabularPolicy(rng.normal(size=(1, 4)))
    rw, rl = 1.3, -0.4
    a = fpo_loss_general(LossConfig(gen, variant="general_k"), pol, ref, KSampleBatch([0], [[2, 1]], [[rw, rl]]))
    b = fpo_loss_pairwise_reward(
        LossConfig(gen, variant="pairwise_reward"), pol, ref, PairwiseBatch.from_records([(0, 2, 1)], [(rw, rl)])
    )
    assert a.loss == pytest.approx(b.loss, abs=1e-12)
    np.testing.assert_allclose(a.gradient, b.gradient, atol=1e-12)


def test_general_fkl_k3_example():
    pol, ref, batch = k_instance(np.log([0.2, 0.3, 0.5]), np.log([0.5, 0.3, 0.2]))
    lv = fpo_loss_general(LossConfig(forward_kl(), beta=1.0, variant="general_k"), pol, ref, batch)
    assert lv.loss == pytest.approx(FKL_K3, abs=1e-14)


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_pairwise_reward_zero_cases(gen):
    cfg = LossConfig(gen, beta=1.0, variant="pairwise_reward")
    assert abs(fpo_loss_pairwise_reward(cfg, *pair(0.7, rewards=[(1.2, 0.5)])).loss) < 1e-14
    assert abs(fpo_loss_pairwise_reward(cfg, *pair(0.0, rewards=[(0.3, 0.3)])).loss) < 1e-15


def test_pairwise_reward_rkl_example():
    cfg = LossConfig(reverse_kl(), beta=1.0, variant="pairwise_reward")
    lv = fpo_loss_pairwise_reward(cfg, *pair(1.0, rewards=[(2.0, 0.0)]))
    assert lv.loss == pytest.approx(RKL_PAIR_DELTA1_DR2, abs=1e-14)


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_pairwise_reward_saturated_rewards_are_finite(gen):
    cfg = LossConfig(gen, beta=1.0, variant="pairwise_reward")
    lv = fpo_loss_pairwise_reward(cfg, *pair(2.0, rewards=[(500.0, -500.0)]))
    assert np.isfinite(lv.loss) and np.all(np.isfinite(lv.gradient))


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_smoothed_half_at_zero(gen):
    cfg = LossConfig(gen, beta=1.0, epsilon=0.5)
    assert abs(fpo_loss_pairwise_smoothed(cfg, *pair(0.0)).loss) < 1e-15


def test_smoothed_examples():
    cfg = dpo_as_fpo_config(1.0)
    assert fpo_loss_pairwise_smoothed(cfg, *pair(0.0)).loss == pytest.approx(math.log(2), abs=1e-15)
    cfg = LossConfig(forward_kl(), beta=1.0, epsilon=1e-3)
    assert fpo_loss_pairwise_smoothed(cfg, *pair(2.0)).loss == pytest.approx(EXO_DELTA2, abs=1e-14)


def dpo_at(delta, beta=1.0):
    pol, ref, batch = pair(delta, beta)
    return dpo_loss(pol, ref, beta, batch).loss


def exo_at(delta, epsilon, beta=1.0):
    pol, ref, batch = pair(delta, beta)
    return exo_loss(pol, ref, beta, epsilon, batch).loss


def test_dpo_examples():
    assert dpo_at(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert dpo_at(1.0) == pytest.approx(SOFTPLUS_M1, abs=1e-15)
    assert dpo_at(60.0) < 1e-25


def test_exo_examples():
    assert abs(exo_at(0.0, 0.5)) < 1e-15
    assert exo_at(2.0, 1e-3) == pytest.approx(EXO_DELTA2, abs=1e-14)
    with pytest.raises(ConfigError):
        exo_at(2.0, 0.0)


def test_simpo_delta_example():
    lp = np.array([[-1.0, -2.0, math.log(1 - math.exp(-1) - math.exp(-2))]])
    pol = TabularPolicy(lp, [[2, 4, 1]])
    assert simpo_style_delta(pol, 2.0, 0.5, (0, 0, 1)) == pytest.approx(-0.5, abs=1e-14)
    flat = TabularPolicy([[0.0, 0.0]], [[3, 3]])
    assert simpo_style_delta(flat, 2.6, 0.0, (0, 0, 1)) == 0.0
    with pytest.raises(LengthError):
        TabularPolicy([[0.0, 0.0]], [[0, 3]])


# ----------------------------------------------------------------------------
# invariants


def test_l1_general_is_exact_divergence(rng):
    for gen in GENS:
        for _ in range(20):
            k = rng.integers(2, 7)
            g = rng.normal(scale=2, size=k)
            r = rng.normal(scale=2, size=k)
            pol, ref, batch = k_instance(g, r)
            lv = fpo_loss_general(LossConfig(gen, beta=1.0, variant="general_k"), pol, ref, batch)
            v = np.exp(g - np.logaddexp.reduce(g))
            w = np.exp(r - np.logaddexp.reduce(r))
            assert lv.loss == pytest.approx(exact_f_divergence(gen, v, w), abs=1e-12)


def test_l2_l3_recovery(rng):
    deltas = rng.uniform(-10, 10, size=1000)
    beta = 0.5
    for d in deltas:
        inst = pair(d, beta)
        assert abs(fpo_loss_pairwise_smoothed(dpo_as_fpo_config(beta), *inst).loss - dpo_at(d, beta)) < 1e-10
        fkl = fpo_loss_pairwise_smoothed(LossConfig(forward_kl(), beta=beta, epsilon=1e-3), *inst).loss
        assert abs(fkl - exo_at(d, 1e-3, beta)) < 1e-12


def test_dpo_gradient_matches_rkl_limit(small_instance):
    pol, ref, pb, _ = small_instance
    a = dpo_loss(pol, ref, 0.5, pb)
    b = fpo_loss(dpo_as_fpo_config(0.5), pol, ref, pb)
    assert a.loss == pytest.approx(b.loss, abs=1e-12)
    np.testing.assert_allclose(a.gradient, b.gradient, atol=1e-10)


@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_l4_affine_invariance(gen, rng):
    shifted = gen.shifted(3.0)
    for d in rng.uniform(-10, 10, size=50):
        for eps in (1e-3, 0.1, 0.5):
            a = fpo_loss_pairwise_smoothed(LossConfig(gen, beta=1.0, epsilon=eps), *pair(d)).loss
            b = fpo_loss_pairwise_smoothed(LossConfig(shifted, beta=1.0, epsilon=eps), *pair(d)).loss
            assert abs(a - b) < 1e-12


def test_l5_alpha_forward_end(rng):
    lo = alpha_divergence(1e-4)
    for d in rng.uniform(-10, 10, size=200):
        a = fpo_loss_pairwise_smoothed(LossConfig(lo, beta=1.0, epsilon=0.1), *pair(d)).loss
        b = fpo_loss_pairwise_smoothed(LossConfig(forward_kl(), beta=1.0, epsilon=0.1), *pair(d)).loss
        assert abs(a - b) < 1e-3


def test_l5_alpha_reverse_end_gap_is_first_order_in_one_minus_alpha():
    """The alpha -> 1 gap shrinks linearly in (1 - alpha), as the expansion predicts.

    At 1 - alpha = 1e-4 it exceeds 1e-3 for strongly negative margins; see
    the acceptance suite for the full-range check.
    """
    gaps = []
    for t in (1e-3, 1e-4, 1e-5):
        a = fpo_loss_pairwise_smoothed(LossConfig(alpha_divergence(1 - t), beta=1.0, epsilon=0.1), *pair(-10.0)).loss
        b = fpo_loss_pairwise_smoothed(LossConfig(reverse_kl(), beta=1.0, epsilon=0.1), *pair(-10.0)).loss
        gaps.append(abs(a - b))
    assert gaps[0] / gaps[1] == pytest.approx(10, rel=0.05)
    assert gaps[1] / gaps[2] == pytest.approx(10, rel=0.05)


VARIANTS = ["general_k", "pairwise_reward", "pairwise_smoothed", "simpo_style"]


def _cfg(variant, gen):
    return LossConfig(gen, beta=0.5, epsilon=0.1, variant=variant, gamma=0.3 if variant == "simpo_style" else None)


def _batch(variant, inst):
    return inst[3] if variant == "general_k" else inst[2]


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_l6_gradient_check(variant, gen, small_instance):
    pol, ref = small_instance[:2]
    rep = loss_gradient_check(_cfg(variant, gen), pol, ref, _batch(variant, small_instance))
    assert rep.max_rel_error < 1e-5
    assert rep.num_checked > 0


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("gen", GENS, ids=IDS)
def test_l7_nonnegative_and_gradient_rows_sum_to_zero(variant, gen, small_instance):
    pol, ref = small_instance[:2]
    lv = fpo_loss(_cfg(variant, gen), pol, ref, _batch(variant, small_instance))
    if variant != "simpo_style":
        assert lv.loss >= -1e-12
    np.testing.assert_allclose(lv.gradient.sum(axis=1), 0, atol=1e-12)


def test_gradient_at_minimum_vanishes():
    pol, ref, batch = k_instance(np.log([0.2, 0.3, 0.5]), np.log([0.2, 0.3, 0.5]))
    rep = loss_gradient_check(LossConfig(forward_kl(), beta=1.0, variant="general_k"), pol, ref, batch)
    assert rep.grad_norm < 1e-8


def test_sum_reduction(small_instance):
    pol, ref, pb, _ = small_instance
    mean = fpo_loss(LossConfig(forward_kl()), pol, ref, pb)
    total = fpo_loss(LossConfig(forward_kl(), reduction="sum"), pol, ref, pb)
    assert total.loss == pytest.approx(len(pb) * mean.loss, rel=1e-12)


# ----------------------------------------------------------------------------
# configuration and errors


def test_epsilon_zero_needs_finite_slope():
    for gen in (forward_kl(), default_generators()[3]):
        with pytest.raises(ConfigError):
            fpo_loss_pairwise_smoothed(LossConfig(gen, beta=1.0, epsilon=0.0), *pair(1.0))
    cfg = LossConfig(reverse_kl(), beta=1.0, epsilon=0.0, epsilon_limit=False)
    with pytest.raises(ConfigError):
        fpo_loss_pairwise_smoothed(cfg, *pair(1.0))


@pytest.mark.parametrize(
    "kw",
    [dict(epsilon=-0.1), dict(epsilon=0.6), dict(beta=0.0), dict(variant="nope"),
     dict(variant="simpo_style"), dict(gamma=1.0), dict(reduction="max")],
)
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        LossConfig(forward_kl(), **kw)


def test_config_json_round_trip():
    cfg = LossConfig(alpha_divergence(0.3), beta=2.6, epsilon=0.01, variant="simpo_style", gamma=1.43)
    assert LossConfig.from_json(cfg.to_json()) == cfg
    assert json.loads(cfg.to_json())["generator"] == "alpha:0.3"


def test_batch_validation(small_instance):
    pol, ref, pb, kb = small_instance
    with pytest.raises(IndexError):
        fpo_loss(LossConfig(forward_kl()), pol, ref, PairwiseBatch.from_records([(0, 0, 8)]))
    with pytest.raises(ShapeError):
        fpo_loss(LossConfig(forward_kl()), pol, TabularPolicy(np.zeros((4, 7))), pb)
    with pytest.raises(ConfigError):
        fpo_loss(LossConfig(forward_kl(), variant="general_k"), pol, ref, pb)
    with pytest.raises(ConfigError):
        fpo_loss(LossConfig(forward_kl(), variant="pairwise_reward"), pol, ref, PairwiseBatch.from_records([(0, 0, 1)]))
    with pytest.raises(ShapeError):
        KSampleBatch([0], [[1, 1]], [[0.0, 0.0]])
    assert len(KSampleBatch([0], [[1, 1]], [[0.0, 0.0]], allow_repeats=True)) == 1


def test_numeric_helpers_agree_with_scipy():
    d = np.linspace(-30, 30, 7)
    np.testing.assert_allclose(np.exp(log_expit(d)), expit(d))
