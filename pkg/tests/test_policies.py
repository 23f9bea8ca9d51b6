import math

import numpy as np
import pytest

from triage_rl.approximator import FeedForwardNet, LinearNet, Sgd
from triage_rl.checks import central_difference
from triage_rl.gridworld import Grid, Position
from triage_rl.perception import PerceptionMask
from triage_rl.policies import (Actor, EmpiricalHumanPolicy, HumanPolicyConfig, entropy_bonus,
                                estimate_human_policy, floored_human_prob, human_action_distribution,
                                masked_softmax, overall_action_distribution, sample_action)


def next_row(cells, lane=1):
    g = Grid(np.array([[0, 0, 0], cells], np.int8), np.ones(2, np.int8))
    return g, Position(0, lane)


def test_human_splits_ties():
    g, pos = next_row([0, 1, 0])
    np.testing.assert_allclose(human_action_distribution(g, pos, HumanPolicyConfig()), [0.5, 0, 0.5])


def test_human_uniform_when_all_equal():
    g, pos = next_row([1, 1, 1])
    np.testing.assert_allclose(human_action_distribution(g, pos, HumanPolicyConfig()), [1 / 3] * 3)


def test_car_blind_human_sees_car_as_road():
    g, pos = next_row([0, 1, 3])
    dist = human_action_distribution(g, pos, HumanPolicyConfig(PerceptionMask.from_names(["car"])))
    np.testing.assert_allclose(dist, [0.5, 0, 0.5])


def test_switch_blindness_only_right_after_a_switch():
    g, pos = next_row([3, 0, 1])
    cfg = HumanPolicyConfig(PerceptionMask.from_names(["grass"]), PerceptionMask.from_names(["car"]))
    np.testing.assert_allclose(human_action_distribution(g, pos, cfg, just_switched=False), [0, 0.5, 0.5])
    np.testing.assert_allclose(human_action_distribution(g, pos, cfg, just_switched=True), [1 / 3] * 3)


def test_masked_softmax_examples():
    np.testing.assert_allclose(masked_softmax(np.zeros(3), np.ones(3, bool)), [1 / 3] * 3)
    np.testing.assert_allclose(masked_softmax(np.zeros(3), np.array([False, True, True])), [0, 0.5, 0.5])
    np.testing.assert_allclose(masked_softmax(np.array([math.log(2), 0, 0]), np.ones(3, bool)), [0.5, 0.25, 0.25])


def test_mixture_boundaries():
    pm, ph = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    np.testing.assert_array_equal(overall_action_distribution(1.0, pm, ph), pm)
    np.testing.assert_array_equal(overall_action_distribution(0.0, pm, ph), ph)
    np.testing.assert_allclose(overall_action_distribution(0.5, pm, ph), [0.5, 0.5, 0])
    with pytest.raises(ValueError):
        overall_action_distribution(1.5, pm, ph)


def test_sample_action_never_picks_zero_mass():
    probs = np.array([0.0, 0.5, 0.5])
    assert {sample_action(probs, u) for u in np.linspace(0, 0.999999, 101)} == {1, 2}
    assert sample_action(np.array([0.3, 0.7, 0.0]), 1.0 - 1e-16) == 1


def test_empirical_policy_counts():
    est = estimate_human_policy([("s", 0), ("s", 0), ("s", 1), ("s", 2)])
    np.testing.assert_allclose(est.distribution("s"), [0.5, 0.25, 0.25])
    assert est.distribution("t") is None and est.prob("t", 0) is None
    with pytest.raises(ValueError):
        estimate_human_policy([])


def test_empirical_policy_converges_on_two_states():
    rng = np.random.default_rng(0)
    true = {0: np.array([0.2, 0.5, 0.3]), 1: np.array([0.6, 0.1, 0.3])}
    est = EmpiricalHumanPolicy()
    s = 0
    for _ in range(100_000):
        est.add(s, int(rng.choice(3, p=true[s])))
        s = int(rng.integers(2))
    for k in true:
        np.testing.assert_allclose(est.distribution(k), true[k], atol=0.01)


def test_coverage_floor(caplog):
    assert floored_human_prob(0.3) == 0.3
    assert floored_human_prob(0.0) == 1e-6
    assert "coverage" in caplog.text


def test_entropy_examples():
    h, _ = entropy_bonus(np.full(3, 1 / 3), 1.0)
    assert h == pytest.approx(math.log(3))
    h, g = entropy_bonus(np.array([0.0, 1.0, 0.0]), 1.0)
    assert h == 0 and not g.any()


def test_entropy_gradient_matches_finite_differences():
    z = np.array([0.3, -0.2, 0.5])
    legal = np.ones(3, bool)

    def ent(logits):
        return entropy_bonus(masked_softmax(logits, legal), 0.7)[0]
    _, g = entropy_bonus(masked_softmax(z, legal), 0.7)
    np.testing.assert_allclose(g, central_difference(ent, z), rtol=1e-6)


def test_zero_entropy_weight_is_plain_update():
    rng = np.random.default_rng(1)
    net = FeedForwardNet.initialized(4, 5, 3, rng, "standard")
    a, b = Actor(net.copy(), Sgd(net.params.size, 0.1)), Actor(net.copy(), Sgd(net.params.size, 0.1))
    s, legal = rng.normal(size=4), np.ones(3, bool)
    a.policy_step(s, legal, 1, 0.8)
    b.policy_step(s, legal, 1, 0.8, entropy_weight=0.0)
    np.testing.assert_array_equal(a.net.params, b.net.params)


def test_policy_step_descends_weighted_log_prob():
    actor = Actor(LinearNet(2, 3), Sgd(6, 0.5))
    s, legal = np.array([1.0, 0.0]), np.ones(3, bool)
    before = actor.distribution(s, legal)[2]
    actor.policy_step(s, legal, 2, weight=1.0)  # positive cost-to-go: make the action less likely
    assert actor.distribution(s, legal)[2] < before


def test_actor_rejects_nonfinite_weight():
    actor = Actor(LinearNet(2, 3))
    with pytest.raises(FloatingPointError):
        actor.policy_step(np.ones(2), np.ones(3, bool), 0, float("nan"))


def test_illegal_action_gets_no_probability():
    actor = Actor(FeedForwardNet.initialized(4, 3, 3, np.random.default_rng(2), "standard"))
    p = actor.distribution(np.ones(4), np.array([True, True, False]))
    assert p[2] == 0 and p.sum() == pytest.approx(1)
