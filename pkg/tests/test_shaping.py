from __future__ import annotations

import math

import numpy as np
import pytest

from chartshape.autodiff import Tensor, value_and_grad
from chartshape.policy import AnswerDistribution, PolicyParams, PolicyShape
from chartshape.shaping import (
    DomainError,
    GroupTooSmall,
    MissingFragment,
    RolloutGroup,
    TrainConfig,
    compose,
    compute_reward,
    consistency_loss,
    consistency_term,
    grpo_term,
    group_advantages,
    kl_divergence,
    policy_logprobs,
    separation_loss,
    separation_term,
    stage_objective,
)


def kl_sum(p, q) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


# -- KL ---------------------------------------------------------------------------------------


def test_kl_identity_and_reference():
    p = AnswerDistribution.from_logits([0.3, -1.0, 2.0, 0.0])
    assert kl_divergence(p, p) == 0.0
    for eps in (1e-3, 1e-6, 1e-9):
        floored = np.array([0.5, 0.5, eps, eps])
        floored /= floored.sum()
        assert kl_divergence(floored, [0.25] * 4) == pytest.approx(kl_sum(floored, [0.25] * 4), abs=1e-15)
    assert kl_divergence([0.5, 0.5, 1e-12, 1e-12], [0.25] * 4) == pytest.approx(math.log(2), abs=1e-9)


def test_kl_guard_and_asymmetry():
    with pytest.raises(DomainError):
        kl_divergence([0.5, 0.5, 0, 0], [0.5, 0, 0.5, 0])
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = AnswerDistribution.from_logits(rng.normal(size=4) * 2)
        q = AnswerDistribution.from_logits(rng.normal(size=4) * 2)
        assert kl_divergence(p, q) >= 0 and kl_divergence(p, q) == pytest.approx(kl_sum(p.probs, q.probs), rel=1e-12)
    p = AnswerDistribution.from_probs([0.7, 0.1, 0.1, 0.1])
    q = AnswerDistribution.from_probs([0.25, 0.25, 0.25, 0.25])
    assert kl_divergence(p, q) != pytest.approx(kl_divergence(q, p))


# -- rewards and advantages ------------------------------------------------------------------------


def test_reward_values():
    assert compute_reward(2, 2).value == 1.0
    assert compute_reward(1, 2).value == pytest.approx(0.1)
    assert compute_reward(None, 2).value == 0.0
    assert compute_reward(7, 2).value == 0.0
    assert {compute_reward(i, 0).value for i in (None, 0, 1)} <= {0.0, 0.1, 0.9, 1.0}


def test_advantages_hand_case():
    assert np.allclose(group_advantages([1, 1, 0, 0]), [1, 1, -1, -1], atol=1e-6)
    assert group_advantages([0.1] * 8).tolist() == [0.0] * 8
    with pytest.raises(GroupTooSmall):
        group_advantages([1.0])


def test_advantage_sweep_properties():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        r = rng.choice([0.0, 0.1, 1.0], size=8)
        a = group_advantages(r)
        assert abs(a.mean()) < 1e-9
        if r.std() > 0:
            # unit variance up to the +1e-8 floor in the denominator
            assert abs(a.std() - r.std() / (r.std() + 1e-8)) < 1e-12
            assert abs(a.std() - 1) < 1e-6
            assert np.allclose(group_advantages(r + 3.0), a, atol=1e-7)
            assert np.allclose(group_advantages(r * 5.0), a, atol=1e-7)


def test_group_build():
    g = RolloutGroup.build("i", [0, 1, 0, 3], [-1.0, -2.0, -1.0, -0.5], answer_index=0)
    assert g.rewards.tolist() == [1.0, pytest.approx(0.1), 1.0, pytest.approx(0.1)]
    assert g.correct.tolist() == [True, False, True, False]
    assert abs(sum(g.advantages)) < 1e-12


# -- surrogate ------------------------------------------------------------------------------------------

SHAPE = PolicyShape(6, 3)


def _setup(seed=0):
    rng = np.random.default_rng(seed)
    theta = PolicyParams.init(SHAPE, seed).theta + rng.normal(scale=0.5, size=SHAPE.size)
    x = rng.random((2, 6))
    return theta, x


def _logp(theta, x, t):
    return policy_logprobs(Tensor(theta), SHAPE, x, t).data


def test_surrogate_zero_when_policy_equals_old():
    theta, x = _setup()
    cfg = TrainConfig(gamma=0.0)
    acts = np.array([[0, 1, 2, 3], [3, 3, 1, 0]])
    lp = _logp(theta, x, cfg.temperature)
    old = np.take_along_axis(lp, acts, axis=1)
    adv = np.stack([group_advantages([1, 0.1, 0.1, 1]), group_advantages([0.1, 0.1, 1, 0.1])])
    frag = grpo_term(Tensor(theta), SHAPE, x, acts, old, adv, theta, cfg)
    assert abs(frag.loss.item()) < 1e-15
    assert frag.stats["clip_fraction"] == 0.0


@pytest.mark.parametrize("ratio, adv, expected", [(1.5, 1.0, -1.2), (0.5, -1.0, 0.8), (1.1, 1.0, -1.1), (0.5, 1.0, -0.5)])
def test_surrogate_clip_arithmetic(ratio, adv, expected):
    theta, x = _setup()
    cfg = TrainConfig(gamma=0.0, epsilon=0.2)
    lp = _logp(theta, x[:1], cfg.temperature)
    old = lp[:, [2]] - math.log(ratio)
    frag = grpo_term(Tensor(theta), SHAPE, x[:1], [[2]], old, [[adv]], theta, cfg)
    assert frag.loss.item() == pytest.approx(expected, abs=1e-12)


def test_reference_kl_term():
    theta, x = _setup()
    ref = theta + 0.3
    cfg = TrainConfig(gamma=0.5)
    lp = _logp(theta, x, cfg.temperature)
    lref = _logp(ref, x, cfg.temperature)
    acts = np.zeros((2, 2), dtype=int)
    old = np.take_along_axis(lp, acts, axis=1)
    frag = grpo_term(Tensor(theta), SHAPE, x, acts, old, np.zeros((2, 2)), ref, cfg)
    expected = np.mean([kl_sum(np.exp(a), np.exp(b)) for a, b in zip(lp, lref)])
    assert frag.loss.item() == pytest.approx(0.5 * expected, rel=1e-12)
    assert frag.stats["kl_to_ref"] == pytest.approx(expected, rel=1e-12)


# -- constraints ------------------------------------------------------------------------------------------


def _pair_with_kl(target: float, seed: int = 0):
    """Params and two inputs whose view KL at T=0.85 equals ``target``."""
    rng = np.random.default_rng(seed)
    base = rng.normal(size=SHAPE.size)
    x = rng.random((1, 6))
    x2 = -2 * x
    cfg = TrainConfig()
    out = SHAPE.slices["w2"][0]

    def scaled(s):
        theta = base.copy()
        theta[out] *= s
        return PolicyParams(SHAPE, theta)

    def kl_at(s):
        return separation_loss(scaled(s), x, x2, TrainConfig(c_sep=1e9))

    lo, hi = 0.0, 1.0
    while kl_at(hi) < target:
        hi *= 2
        assert hi < 1e6
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if kl_at(mid) < target else (lo, mid)
    return scaled(hi), x, x2, cfg


def test_consistency_gate_clip_identity():
    params, x, xp, cfg = _pair_with_kl(2.0)
    assert consistency_loss(params, x, xp, False, cfg) == 0.0
    assert consistency_loss(params, x, None, True, cfg) == 0.0
    assert consistency_loss(params, x, xp, True, cfg) == 1.0
    _, g = value_and_grad(
        lambda t: consistency_term(t, SHAPE, x, xp, [[True]], [True], cfg).loss, params.theta
    )
    assert not g.any()
    assert abs(consistency_loss(params, x, x, True, cfg)) < 1e-12


def test_consistency_matches_direct_kl_below_clip():
    params, x, xp, cfg = _pair_with_kl(0.4)
    lp = _logp(params.theta, x, cfg.temperature)[0]
    lq = _logp(params.theta, xp, cfg.temperature)[0]
    assert consistency_loss(params, x, xp, True, cfg) == pytest.approx(kl_sum(np.exp(lp), np.exp(lq)), rel=1e-12)


def test_consistency_is_per_rollout():
    params, x, xp, cfg = _pair_with_kl(0.4)
    kl = consistency_loss(params, x, xp, True, cfg)
    frag = consistency_term(Tensor(params.theta), SHAPE, x, xp, [[True, False, True, False]], [True], cfg)
    assert frag.loss.item() == pytest.approx(kl * 2 / 4, rel=1e-12)


def test_separation_cases():
    params, x, xa, cfg = _pair_with_kl(0.5)
    assert abs(separation_loss(params, x, x, cfg)) < 1e-12
    assert separation_loss(params, x, xa, cfg) == 0.2
    _, g = value_and_grad(lambda t: separation_term(t, SHAPE, x, xa, cfg).loss, params.theta)
    assert not g.any()
    params, x, xa, cfg = _pair_with_kl(0.1)
    assert separation_loss(params, x, xa, cfg) == pytest.approx(0.1, abs=1e-12)
    _, g = value_and_grad(lambda t: separation_term(t, SHAPE, x, xa, cfg).loss, params.theta)
    assert np.abs(g).max() > 0


# -- composition ---------------------------------------------------------------------------------------------


def test_stage_arithmetic():
    cfg = TrainConfig()
    assert stage_objective("stage1", {"l_grpo": 0.5, "l_cons": 0.3}, cfg).l_total == pytest.approx(0.503, abs=1e-12)
    assert stage_objective("stage2", {"l_grpo": 0.5, "l_sep": 0.2}, cfg).l_total == pytest.approx(0.496, abs=1e-12)
    joint = stage_objective("joint", {"l_grpo": 0.5, "l_cons": 0.3, "l_sep": 0.2}, cfg)
    assert joint.l_total == pytest.approx(0.5 + 0.003 - 0.004, abs=1e-12)
    zero = TrainConfig(alpha=0.0, beta=0.0)
    for stage in ("stage1", "stage2", "joint"):
        rep = stage_objective(stage, {"l_grpo": 0.7, "l_cons": 0.4, "l_sep": 0.1}, zero)
        assert rep.l_total == 0.7


def test_stage_isolation_and_missing_fragments():
    cfg = TrainConfig()
    r1 = stage_objective("stage1", {"l_grpo": 0.5, "l_cons": 0.3, "l_sep": 0.9}, cfg)
    assert r1.l_sep == 0.0
    r2 = stage_objective("stage2", {"l_grpo": 0.5, "l_cons": 0.3, "l_sep": 0.1}, cfg)
    assert r2.l_cons == 0.0
    with pytest.raises(MissingFragment):
        stage_objective("stage1", {"l_grpo": 0.5}, cfg)
    with pytest.raises(MissingFragment):
        stage_objective("stage2", {"l_grpo": 0.5, "l_cons": 0.1}, cfg)
    with pytest.raises(MissingFragment):
        stage_objective("joint", {"l_cons": 0.1, "l_sep": 0.1}, cfg)
    with pytest.raises(ValueError):
        compose("stage3", 0.0, 0.0, 0.0, cfg)


def test_linearity_in_coefficients():
    frags = {"l_grpo": 0.37, "l_cons": 0.21, "l_sep": 0.13}
    totals_a = [stage_objective("joint", frags, TrainConfig(alpha=a, beta=0.0)).l_total for a in (0.0, 0.05, 0.1)]
    totals_b = [stage_objective("joint", frags, TrainConfig(alpha=0.0, beta=b)).l_total for b in (0.0, 0.05, 0.1)]
    assert (totals_a[1] - totals_a[0]) / 0.05 == pytest.approx(0.21, abs=1e-12)
    assert (totals_a[2] - totals_a[1]) / 0.05 == pytest.approx(0.21, abs=1e-12)
    assert (totals_b[1] - totals_b[0]) / 0.05 == pytest.approx(-0.13, abs=1e-12)
    assert (totals_b[2] - totals_b[1]) / 0.05 == pytest.approx(-0.13, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(c_sep=0)
    with pytest.raises(ValueError):
        TrainConfig(group_size=1)
