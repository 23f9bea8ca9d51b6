import numpy as np
import pytest

from triage_rl import oracle as orc
from triage_rl.checks import central_difference


def one_step_mdp(cost=1.0, control=(0.0, 0.5)):
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    return orc.TabularMDP(p, np.array([[cost], [0.0]]), np.array([False, True]), np.array(control),
                          np.array([1.0, 0.0]))


def random_instance(seed, n_states=6, tau=None):
    rng = np.random.default_rng(seed)
    mdp = orc.random_mdp(rng, n_states, 3, control_costs=(0.3, 0.1))
    pi_h = orc.random_policy(rng, n_states, 3)
    theta = rng.normal(size=(n_states, 3))
    tau = rng.uniform(size=n_states) if tau is None else np.full(n_states, float(tau))
    tau[mdp.terminal] = 0.0
    return mdp, pi_h, theta, tau


def test_mixture_kernel_limits_and_convexity():
    mdp, pi_h, theta, _ = random_instance(0)
    pi_m = orc.softmax_policy(theta)
    P_h, P_m = orc.policy_kernel(mdp, pi_h), orc.policy_kernel(mdp, pi_m)
    for t, want in ((0.0, P_h), (1.0, P_m), (0.5, 0.5 * P_h + 0.5 * P_m)):
        P, D = orc.mixture_kernel(mdp, orc.TabularPolicyPair(pi_h, pi_m, np.full(6, t)))
        np.testing.assert_allclose(P, want, atol=1e-14)
        np.testing.assert_array_equal(np.diag(D), t)


def test_all_terminal_values_are_zero():
    p = np.zeros((2, 2, 2))
    p[0, :, 0] = p[1, :, 1] = 1.0
    mdp = orc.TabularMDP(p, np.zeros((2, 2)), np.array([True, True]), np.zeros(2), np.array([0.5, 0.5]))
    pair = orc.TabularPolicyPair(np.full((2, 2), 0.5), np.full((2, 2), 0.5), np.zeros(2))
    assert not orc.exact_values(mdp, pair).v.any()


def test_single_step_hand_computation():
    mdp = one_step_mdp()
    pair = orc.TabularPolicyPair(np.ones((2, 1)), np.ones((2, 1)), np.array([1.0, 0.0]))
    vals = orc.exact_values(mdp, pair)
    assert vals.v[0] == pytest.approx(1.5)
    assert vals.Q[0].tolist() == pytest.approx([1.0, 1.5])


def test_values_match_monte_carlo():
    mdp, pi_h, theta, tau = random_instance(1)
    pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
    v = orc.exact_values(mdp, pair).v
    rng = np.random.default_rng(2)
    n = 200_000
    for s in range(5):
        returns = orc.simulate_returns(mdp, pair, np.full(n, s), rng)
        assert abs(returns.mean() - v[s]) < 3 * returns.std() / np.sqrt(n)


def test_option_value_identity_and_residual():
    mdp, pi_h, theta, tau = random_instance(3)
    pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
    vals = orc.exact_values(mdp, pair)
    np.testing.assert_allclose(vals.v, tau * vals.Q[:, 1] + (1 - tau) * vals.Q[:, 0], atol=1e-12)
    assert orc.bellman_residual(mdp, pair, vals) < 1e-10


def test_non_terminating_policy_is_an_error():
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = 1.0  # action 0 loops forever
    p[0, 1, 1] = 1.0
    p[1, :, 1] = 1.0
    c = np.array([[1.0, 1.0], [0.0, 0.0]])
    mdp = orc.TabularMDP(p, c, np.array([False, True]), np.zeros(2), np.array([1.0, 0.0]))
    stuck = np.array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(orc.SingularSystemError):
        orc.exact_values(mdp, orc.TabularPolicyPair(stuck, stuck, np.zeros(2)))


def test_stationary_examples():
    np.testing.assert_allclose(orc.stationary_distribution(np.array([[0.0, 1.0], [1.0, 0.0]])), [0.5, 0.5])
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(4, 4))
    for _ in range(200):  # Sinkhorn to a doubly stochastic matrix
        a /= a.sum(1, keepdims=True)
        a /= a.sum(0, keepdims=True)
    np.testing.assert_allclose(orc.stationary_distribution(a), 0.25, atol=1e-8)
    with pytest.raises(orc.ReducibleChainError):
        orc.stationary_distribution(np.eye(2))


def test_restart_chain_matches_visit_frequencies():
    mdp = orc.chain_mdp()
    pi_h = np.full((4, 3), 1 / 3)
    K = orc.restart_kernel(mdp, orc.policy_kernel(mdp, pi_h))
    counts = orc.simulate_chain(K, 1000, 2000, np.random.default_rng(5), burn_in=50)
    np.testing.assert_allclose(counts / counts.sum(), orc.stationary_distribution(K), atol=1e-3)


def test_emphatic_weighting_examples():
    mdp, pi_h, theta, _ = random_instance(6)
    pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), np.zeros(6))
    P, D = orc.mixture_kernel(mdp, pair)
    d = orc.human_stationary(mdp, pi_h)
    assert not orc.emphatic_weightings(d, orc.transient(P, mdp.terminal), D).any()

    small = one_step_mdp()
    pair = orc.TabularPolicyPair(np.ones((2, 1)), np.ones((2, 1)), np.array([1.0, 0.0]))
    P, D = orc.mixture_kernel(small, pair)
    d = np.array([0.5, 0.5])
    assert orc.emphatic_weightings(d, orc.transient(P, small.terminal), D)[0] == pytest.approx(0.5)


def test_flat_action_values_give_zero_gradient():
    # costs that do not depend on the action, and actions with the same transitions
    rng = np.random.default_rng(7)
    base = orc.random_mdp(rng, 5, 3)
    p = np.repeat(base.p[:, :1], 3, axis=1)
    c = np.repeat(base.c[:, :1], 3, axis=1)
    mdp = orc.TabularMDP(p, c, base.terminal, base.control_costs, base.initial)
    g = orc.exact_offline_gradient(mdp, orc.random_policy(rng, 5, 3), rng.normal(size=(5, 3)),
                                   np.full(5, 0.7))
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_offline_gradient_matches_finite_differences(seed):
    mdp, pi_h, theta, tau = random_instance(10 + seed)
    d_h = orc.human_stationary(mdp, pi_h)
    exact = orc.exact_offline_gradient(mdp, pi_h, theta, tau, d_h)
    fd = central_difference(lambda th: orc.offline_objective(mdp, pi_h, th.reshape(theta.shape), tau, d_h),
                            theta.ravel()).reshape(theta.shape)
    np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)


def test_offline_gradient_with_constant_tau_is_the_emphatic_form():
    mdp, pi_h, theta, tau = random_instance(20, tau=0.6)
    np.testing.assert_allclose(orc.exact_offline_gradient(mdp, pi_h, theta, tau),
                               orc.emphatic_gradient(mdp, pi_h, theta, tau), atol=1e-12)


def test_offline_gradient_equals_online_gradient_for_machine_alone():
    """Weighting by the start law and by tau = 1 makes the two forms coincide."""
    mdp, pi_h, theta, _ = random_instance(21, tau=1.0)
    tau = np.where(mdp.terminal, 0.0, 1.0)
    np.testing.assert_allclose(orc.exact_offline_gradient(mdp, pi_h, theta, tau, d_h=mdp.initial),
                               orc.exact_online_gradient(mdp, pi_h, theta, tau, start=mdp.initial),
                               atol=1e-12)


def test_online_gradient_matches_finite_differences():
    mdp, pi_h, theta, tau = random_instance(22)
    exact = orc.exact_online_gradient(mdp, pi_h, theta, tau)
    fd = central_difference(lambda th: orc.online_objective(mdp, pi_h, th.reshape(theta.shape), tau),
                            theta.ravel()).reshape(theta.shape)
    np.testing.assert_allclose(exact, fd, rtol=1e-6, atol=1e-9)


def test_stability_examples():
    mdp, pi_h, theta, tau = random_instance(23)
    pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
    eye = np.eye(6)
    st = orc.stability_matrix(mdp, pair, eye, eye, np.ones(6))
    np.testing.assert_allclose(st.column_sums, st.expected_column_sums, atol=1e-10)
    assert np.all(st.column_sums[~mdp.terminal] > 0) and st.positive_definite
    zero = orc.stability_matrix(mdp, pair, eye, eye, np.zeros(6))
    assert not zero.A.any() and not zero.positive_definite


def test_stability_on_random_instances():
    rng = np.random.default_rng(24)
    for _ in range(100):
        mdp = orc.random_mdp(rng, 5, 3)
        pair = orc.TabularPolicyPair(orc.random_policy(rng, 5, 3), orc.random_policy(rng, 5, 3),
                                     np.where(mdp.terminal, 0.0, rng.uniform(size=5)))
        phi0, phi1 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        st = orc.stability_matrix(mdp, pair, phi0, phi1, np.ones(5))
        assert orc.row_column_criterion(st.K) and orc.symmetric_min_eigenvalue(st.K) > 0
        assert st.min_eigenvalue > -1e-12


def test_fixture_roundtrip(tmp_path):
    mdp, pi_h, theta, tau = random_instance(25)
    pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
    orc.save_fixture(tmp_path / "f.json", mdp, pair)
    mdp2, pair2 = orc.load_fixture(tmp_path / "f.json")
    np.testing.assert_array_equal(mdp2.p, mdp.p)
    np.testing.assert_array_equal(pair2.tau, pair.tau)


def test_invalid_instances_are_rejected():
    with pytest.raises(orc.ContractViolation):
        orc.TabularPolicyPair(np.full((2, 2), 0.5), np.full((2, 2), 0.5), np.array([0.5, 1.5]))
    p = np.full((2, 1, 2), 0.4)  # rows sum to 0.8
    with pytest.raises(orc.ContractViolation):
        orc.TabularMDP(p, np.zeros((2, 1)), np.array([False, False]), np.zeros(2), np.array([1.0, 0.0]))
