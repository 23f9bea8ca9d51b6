import numpy as np
import pytest

from triage_rl import oracle as orc
from triage_rl.approximator import FeedForwardNet, LinearNet, Sgd
from triage_rl.triage import (HUMAN, MACHINE, EpsilonSchedule, OptionValueCritic, decide, epsilon_at,
                              machine_probability, triage_decide)


def test_zero_net_critic_is_control_cost():
    critic = OptionValueCritic(FeedForwardNet(78, 8, 1), control_costs=(0, 1))
    np.testing.assert_array_equal(critic.values(np.ones(76)), [0.0, 1.0])


def test_control_cost_shifts_machine_value():
    net = FeedForwardNet.initialized(78, 8, 1, np.random.default_rng(0), "standard")
    bare = OptionValueCritic(net.copy())
    costly = OptionValueCritic(net.copy(), control_costs=(0, 1))
    s = np.random.default_rng(1).integers(0, 2, 76).astype(float)
    np.testing.assert_allclose(costly.values(s) - bare.values(s), [0.0, 1.0])


def test_pair_kernel_matches_generic_path():
    net = FeedForwardNet.initialized(78, 16, 1, np.random.default_rng(2), "standard")
    fast = OptionValueCritic(net.copy(), (0.5, 0.25))
    slow = OptionValueCritic(net.copy(), (0.5, 0.25),
                             option_features=lambda s, d: np.concatenate([s, np.eye(2)[d]]))
    s = np.random.default_rng(3).integers(0, 2, 76).astype(float)
    np.testing.assert_allclose(fast.values(s), slow.values(s), atol=1e-12)


@pytest.mark.parametrize("q0,q1,eps,expected", [(3, 2, 0.2, 0.9), (1, 1, 0.2, 0.9), (2, 3, 0.2, 0.1)])
def test_machine_probability(q0, q1, eps, expected):
    assert machine_probability(q0, q1, eps) == pytest.approx(expected)


def test_zero_epsilon_is_argmin():
    assert decide(3.0, 2.0, 0.0, 0.999999) == MACHINE
    assert decide(2.0, 3.0, 0.0, 0.0) == HUMAN


def test_triage_draw_frequency():
    rng = np.random.default_rng(4)
    draws = [triage_decide(3.0, 2.0, 0.2, rng) for _ in range(20_000)]
    assert np.mean(draws) == pytest.approx(0.9, abs=0.01)
    with pytest.raises(ValueError):
        triage_decide(0, 0, 1.5, rng)


def test_epsilon_schedule():
    sched = EpsilonSchedule()
    assert epsilon_at(sched, "offline", 10_000, 60_000) == 0.2
    assert epsilon_at(sched, "offline", 40_000, 60_000) == 0.1
    assert epsilon_at(sched, "online", 1) == epsilon_at(sched, "online", 1000) == pytest.approx(0.1)
    assert epsilon_at(sched, "online", 1001) == pytest.approx(0.1 / np.sqrt(2))
    assert epsilon_at(sched, "online", 100_000) == pytest.approx(0.01)
    per_episode = EpsilonSchedule(online_period=1)
    assert epsilon_at(per_episode, "online", 100) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        epsilon_at(sched, "online", 0)


def test_td_step_moves_toward_target():
    critic = OptionValueCritic(LinearNet(4, 1), optimizer=Sgd(4, 0.5),
                               option_features=lambda s, d: np.concatenate([s, np.eye(2)[d]]))
    s = np.array([1.0, 0.0])
    for _ in range(50):
        critic.td_step(s, MACHINE, 3.0)
    assert critic.q_value(s, MACHINE) == pytest.approx(3.0, abs=1e-6)


def test_state_dict_roundtrip():
    net = FeedForwardNet.initialized(78, 4, 1, np.random.default_rng(5), "standard")
    critic = OptionValueCritic(net, (0, 1), sync_interval=7)
    s = np.ones(76)
    for _ in range(10):
        critic.td_step(s, 1, 2.0)
    again = OptionValueCritic.from_state(critic.state_dict())
    np.testing.assert_array_equal(again.values(s), critic.values(s))
    np.testing.assert_array_equal(again.target_values(s), critic.target_values(s))
    assert again.target.ticks == 10


def test_tabular_linear_critic_reaches_exact_values():
    """Expected TD(0) on one-hot option features converges to Q for a fixed triage."""
    mdp = orc.chain_mdp(control_costs=(0.0, 0.5))
    rng = np.random.default_rng(6)
    pair = orc.TabularPolicyPair(orc.random_policy(rng, 4, 3), orc.random_policy(rng, 4, 3),
                                 np.array([0.3, 0.8, 0.5, 0.0]))
    exact = orc.exact_values(mdp, pair)
    feats = orc.tabular_option_features(4)
    critic = OptionValueCritic(LinearNet(8, 1), mdp.control_costs, sync_interval=1, optimizer=Sgd(8, 0.5),
                               option_features=feats)
    P_h = orc.policy_kernel(mdp, pair.pi_h)
    P_m = orc.policy_kernel(mdp, pair.pi_m)
    c_h = (pair.pi_h * mdp.c).sum(1)
    c_m = (pair.pi_m * mdp.c).sum(1)
    for _ in range(400):
        for s in range(3):
            v = np.array([pair.tau[x] * critic.q_value(np.eye(4)[x], 1) +
                          (1 - pair.tau[x]) * critic.q_value(np.eye(4)[x], 0) for x in range(4)])
            v[mdp.terminal] = 0.0
            critic.td_step(np.eye(4)[s], HUMAN, c_h[s] + P_h[s] @ v)
            critic.td_step(np.eye(4)[s], MACHINE, c_m[s] + mdp.control_costs[1] + P_m[s] @ v)
    learned = np.array([critic.values(np.eye(4)[s]) for s in range(3)])
    np.testing.assert_allclose(learned, exact.Q[:3], atol=1e-2)
