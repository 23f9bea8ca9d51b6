"""Self-checks that pit the implementation against exact or brute-force oracles.

Each check returns a ``CheckResult``; ``run_all`` drives the ``oracle-tests``
CLI subcommand and the acceptance suite reuses the same functions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle as orc
from .approximator import FeedForwardNet, LinearNet
from .gridworld import (DEFAULT_ENV, START_LANE, CellType, Grid, Position, TrafficLevel, generate_episode,
                        legal_mask, optimal_plan, path_cost, sample_cells)
from .perception import OPTION_DIM, STATE_DIM, PerceptionMask, featurize, option_featurize
from .policies import Actor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x, dtype=float)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x, dtype=float)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _instance(rng, n_states=6, n_actions=3, control_costs=None):
    cc = rng.uniform(0, 1, 2) if control_costs is None else control_costs
    mdp = orc.random_mdp(rng, n_states, n_actions, control_costs=cc)
    pi_h = orc.random_policy(rng, n_states, n_actions)
    theta = rng.normal(size=(n_states, n_actions))
    tau = rng.uniform(size=n_states)
    tau[mdp.terminal] = 0.0
    return mdp, pi_h, theta, tau


# 1 ------------------------------------------------------------------------------

def bellman_consistency(n_instances: int = 50, tol: float = 1e-10, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = worst_id = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, 11))
        mdp, pi_h, theta, tau = _instance(rng, n, int(rng.integers(2, 4)))
        pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
        values = orc.exact_values(mdp, pair)
        worst = max(worst, orc.bellman_residual(mdp, pair, values))
        nt = ~mdp.terminal
        ident = tau * values.Q[:, 1] + (1 - tau) * values.Q[:, 0] - values.v
        worst_id = max(worst_id, float(np.max(np.abs(ident[nt]))))
    ok = worst < tol and worst_id < tol
    return CheckResult("bellman consistency", ok,
                       f"max residual {worst:.2e}, max critic-identity gap {worst_id:.2e} over {n_instances} MDPs")


# 2 ------------------------------------------------------------------------------

def offline_gradient(n_instances: int = 20, tol: float = 1e-4, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        mdp, pi_h, theta, tau = _instance(rng, int(rng.integers(3, 8)))
        d_h = orc.human_stationary(mdp, pi_h)
        exact = orc.exact_offline_gradient(mdp, pi_h, theta, tau, d_h)
        fd = central_difference(lambda th: orc.offline_objective(mdp, pi_h, th, tau, d_h), theta)
        worst = max(worst, _rel(exact, fd))
    return CheckResult("offline gradient vs finite differences", worst < tol,
                       f"max relative error {worst:.2e} over {n_instances} instances")


# 3, 4 ----------------------------------------------------------------------------

CHAIN_PI_H = np.array([[0.3, 0.4, 0.3], [0.25, 0.4, 0.35], [0.35, 0.3, 0.35], [1 / 3, 1 / 3, 1 / 3]])
CHAIN_THETA = np.array([[0.8, -0.4, 0.1], [-0.6, 0.3, 0.5], [0.2, 0.9, -0.7], [0.0, 0.0, 0.0]])
# (tau, ratio mode): deterministic triage with sampled ratios, fractional with expected ratios
CHAIN_CASES = (
    (np.array([1.0, 0.0, 1.0, 0.0]), "sampled"),
    (np.array([1.0, 1.0, 1.0, 0.0]), "sampled"),
    (np.array([0.8, 0.3, 0.6, 0.0]), "expected"),
)


def _z(estimate, exact, se):
    """Standard scores; a component with zero spread counts only if it misses."""
    gap = np.abs(estimate - exact)
    z = np.divide(gap, se, out=np.full(gap.shape, np.inf), where=se > 0)
    z[(se == 0) & (gap < 1e-12)] = 0.0
    return z


def _chain_runs(n_steps: int, seed: int):
    mdp = orc.chain_mdp()
    rng = np.random.default_rng(seed)
    for tau, mode in CHAIN_CASES:
        pair = orc.TabularPolicyPair(CHAIN_PI_H, orc.softmax_policy(CHAIN_THETA), tau)
        values = orc.exact_values(mdp, pair)
        est = orc.simulate_emphasis(mdp, pair, values.v, n_steps, rng, ratio=mode)
        yield mdp, pair, tau, mode, est


def emphasis_simulation(n_steps: int = 10**6, n_se: float = 3.0, seed: int = 3) -> CheckResult:
    worst, details = 0.0, []
    for mdp, pair, tau, mode, est in _chain_runs(n_steps, seed):
        P, D = orc.mixture_kernel(mdp, pair)
        d_h = orc.human_stationary(mdp, pair.pi_h)
        m = orc.emphatic_weightings(d_h, orc.transient(P, mdp.terminal), D)
        z = _z(est.m, m, est.m_se)
        worst = max(worst, float(z.max()))
        details.append(f"tau={tau.tolist()}/{mode}: max |z|={z.max():.2f}")
    return CheckResult("emphatic weighting simulation", worst < n_se,
                       f"{'; '.join(details)} ({n_steps} steps each)")


def gradient_estimator_simulation(n_steps: int = 10**6, n_se: float = 3.0, seed: int = 4) -> CheckResult:
    worst, details = 0.0, []
    for mdp, pair, tau, mode, est in _chain_runs(n_steps, seed):
        nt = ~mdp.terminal
        listing = orc.emphatic_gradient(mdp, pair.pi_h, CHAIN_THETA, tau)
        z = _z(est.gradient, listing, est.gradient_se)[nt]
        true = orc.exact_offline_gradient(mdp, pair.pi_h, CHAIN_THETA, tau)
        zf = _z(est.follow_on_gradient, true, est.follow_on_gradient_se)[nt]
        worst = max(worst, float(z.max()), float(zf.max()))
        details.append(f"tau={tau.tolist()}/{mode}: max |z| {z.max():.2f} (emphasis), {zf.max():.2f} (follow-on)")
    return CheckResult("emphatic gradient estimator simulation", worst < n_se,
                       f"{'; '.join(details)} ({n_steps} steps each)")


# 5 ------------------------------------------------------------------------------

def _greedy_fd(mdp, pi_h, theta, eps, d_h, tau0, h=1e-6):
    def f(th):
        return orc.greedy_objective(mdp, pi_h, th, eps, d_h, tau0)[0]
    return central_difference(f, theta, h)


def crossing_instance(seed: int = 5, eps: float = 0.2):
    """A random instance, a state and a direction along which its option gap changes sign."""
    rng = np.random.default_rng(seed)
    for _ in range(200):
        mdp, pi_h, theta, _ = _instance(rng, 5)
        d_h = orc.human_stationary(mdp, pi_h)
        s = int(rng.integers(0, 4))
        values = orc.epsilon_greedy_tau(mdp, pi_h, orc.softmax_policy(theta), eps)[1]
        u = np.zeros_like(theta)
        u[s, int(np.argmin(values.q[s]))] = 1.0
        u[s, int(np.argmax(values.q[s]))] = -1.0
        ts = np.linspace(-6, 6, 49)
        try:
            gaps = [orc.option_gap(mdp, pi_h, theta + t * u, eps)[s] for t in ts]
        except Exception:
            continue
        flips = [i for i in range(len(ts) - 1) if np.sign(gaps[i]) != np.sign(gaps[i + 1])]
        if flips:
            i = flips[0]
            return mdp, pi_h, theta, u, s, d_h, (ts[i], ts[i + 1])
    raise RuntimeError("no crossing found")


def switching_gradient(n_instances: int = 10, tol: float = 1e-3, eps: float = 0.2, seed: int = 5) -> CheckResult:
    """Strict-gap points: greedy objective's gradient equals the fixed-tau formula.
    Across a gap crossing: one-sided derivatives match the formula on each side."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_instances:
        mdp, pi_h, theta, _ = _instance(rng, 5)
        d_h = orc.human_stationary(mdp, pi_h)
        tau, values = orc.epsilon_greedy_tau(mdp, pi_h, orc.softmax_policy(theta), eps)
        gap = np.abs(values.Q[:, 1] - values.Q[:, 0])[~mdp.terminal]
        if gap.min() < 1e-3:
            continue
        formula = orc.exact_offline_gradient(mdp, pi_h, theta, tau, d_h)
        worst = max(worst, _rel(formula, _greedy_fd(mdp, pi_h, theta, eps, d_h, tau)))
        done += 1

    mdp, pi_h, theta, u, s, d_h, (lo, hi) = crossing_instance(seed, eps)
    lo, hi = orc.find_crossing(lambda t: orc.option_gap(mdp, pi_h, theta + t * u, eps)[s], lo, hi)
    h = 1e-5
    side_errors = []
    for t0, sign in ((lo, -1.0), (hi, 1.0)):
        th0 = theta + t0 * u
        tau0, _ = orc.epsilon_greedy_tau(mdp, pi_h, orc.softmax_policy(th0), eps)

        def J(t):
            return orc.greedy_objective(mdp, pi_h, theta + t * u, eps, d_h, tau0)[0]
        # second-order one-sided difference moving away from the crossing
        j0, j1, j2 = J(t0), J(t0 + sign * h), J(t0 + sign * 2 * h)
        fd = sign * (-3 * j0 + 4 * j1 - j2) / (2 * h)
        formula = float(np.sum(orc.exact_offline_gradient(mdp, pi_h, th0, tau0, d_h) * u))
        side_errors.append(abs(fd - formula) / max(abs(formula), 1e-12))
    ok = worst < tol and max(side_errors) < tol
    return CheckResult("switching-policy gradient", ok,
                       f"strict gaps: max relative error {worst:.2e} ({n_instances} points); "
                       f"crossing at state {s}: one-sided errors {side_errors[0]:.2e} / {side_errors[1]:.2e}")


# 6 ------------------------------------------------------------------------------

def online_gradient(n_instances: int = 10, tol: float = 1e-3, eps: float = 0.2, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_fixed = worst_greedy = 0.0
    done = 0
    while done < n_instances:
        mdp, pi_h, theta, tau = _instance(rng, int(rng.integers(3, 8)))
        exact = orc.exact_online_gradient(mdp, pi_h, theta, tau)
        fd = central_difference(lambda th: orc.online_objective(mdp, pi_h, th, tau), theta)
        worst_fixed = max(worst_fixed, _rel(exact, fd))
        tau_g, values = orc.epsilon_greedy_tau(mdp, pi_h, orc.softmax_policy(theta), eps)
        if np.abs(values.Q[:, 1] - values.Q[:, 0])[~mdp.terminal].min() < 1e-3:
            continue

        def j_greedy(th):
            t, v = orc.epsilon_greedy_tau(mdp, pi_h, orc.softmax_policy(th), eps, tau_g)
            return float(mdp.initial @ v.v)
        exact_g = orc.exact_online_gradient(mdp, pi_h, theta, tau_g)
        worst_greedy = max(worst_greedy, _rel(exact_g, central_difference(j_greedy, theta, 1e-6)))
        done += 1
    ok = max(worst_fixed, worst_greedy) < tol
    return CheckResult("on-policy gradient vs finite differences", ok,
                       f"fixed tau: {worst_fixed:.2e}; epsilon-greedy tau: {worst_greedy:.2e} ({n_instances} instances)")


# 7 ------------------------------------------------------------------------------

def critic_stability(n_instances: int = 100, tol: float = 1e-10, seed: int = 7) -> CheckResult:
    rng = np.random.default_rng(seed)
    pd = 0
    worst_col = 0.0
    claim_ok = 0
    for _ in range(n_instances):
        mdp, pi_h, theta, tau = _instance(rng, 5)
        pair = orc.TabularPolicyPair(pi_h, orc.softmax_policy(theta), tau)
        n_feat = int(rng.integers(1, 6))
        phi0, phi1 = rng.normal(size=(5, n_feat)), rng.normal(size=(5, n_feat))
        st = orc.stability_matrix(mdp, pair, phi0, phi1, np.ones(5))
        pd += st.positive_definite
        worst_col = max(worst_col, float(np.max(np.abs(st.column_sums - st.expected_column_sums))))
        K = st.K
        claim_ok += orc.row_column_criterion(K) and orc.symmetric_min_eigenvalue(K) > 0
    # the claim itself on random Z-matrices meeting its hypothesis
    z_ok = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 8))
        K = -rng.uniform(0, 1, (n, n))
        np.fill_diagonal(K, 0.0)
        need = -(K.sum(0) + K.sum(1))
        np.fill_diagonal(K, need / 2 + rng.uniform(0.01, 1.0, n))
        z_ok += orc.row_column_criterion(K) and orc.symmetric_min_eigenvalue(K) > 0
    ok = pd == n_instances and worst_col < tol and claim_ok == n_instances and z_ok == n_instances
    return CheckResult("emphatic critic stability", ok,
                       f"A positive definite {pd}/{n_instances}; K meets row+column criterion and is PD "
                       f"{claim_ok}/{n_instances}; random Z-matrices {z_ok}/{n_instances}; "
                       f"max column-sum error {worst_col:.2e}")


# 8 ------------------------------------------------------------------------------

def approximator_gradients(tol: float = 1e-4, seed: int = 8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n_in, n_hidden, n_out in ((5, 7, 3), (STATE_DIM, 16, 3), (OPTION_DIM, 16, 1)):
        net = FeedForwardNet.initialized(n_in, n_hidden, n_out, rng, "standard")
        x = rng.integers(0, 2, n_in).astype(float) if n_in > 10 else rng.normal(size=n_in)
        w = rng.normal(size=n_out)
        out, cache = net.forward_cached(x)
        analytic = net.backward(x, cache, w)

        def f(p):
            return float(FeedForwardNet(n_in, n_hidden, n_out, params=p).forward(x) @ w)
        worst = max(worst, _rel(analytic, central_difference(f, net.params.copy(), 1e-6)))
    lin = LinearNet(4, 3, bias=True, params=rng.normal(size=15))
    x = rng.normal(size=4)
    w = rng.normal(size=3)
    analytic = lin.backward(x, None, w)
    worst = max(worst, _rel(analytic, central_difference(
        lambda p: float(LinearNet(4, 3, True, params=p).forward(x) @ w), lin.params.copy(), 1e-6)))
    # log-softmax gradient of the actor with an illegal action masked out
    actor = Actor(FeedForwardNet.initialized(6, 5, 3, rng, "standard"))
    s = rng.normal(size=6)
    legal = np.array([False, True, True])
    analytic = actor.log_prob_grad(s, legal, 2)

    def logp(p):
        a = Actor(FeedForwardNet(6, 5, 3, params=p))
        return float(np.log(a.distribution(s, legal)[2]))
    worst = max(worst, _rel(analytic, central_difference(logp, actor.net.params.copy(), 1e-6)))
    return CheckResult("approximator gradients", worst < tol, f"max relative error {worst:.2e}")


# 9 ------------------------------------------------------------------------------

def environment_statistics(n_samples: int = 10**5, tol: float = 0.01, seed: int = 9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for level in TrafficLevel:
        cells = sample_cells(rng, level, n_samples)
        freq = np.bincount(cells, minlength=4) / n_samples
        worst = max(worst, float(np.max(np.abs(freq - DEFAULT_ENV.cell_probs[int(level)]))))
    grid = generate_episode(rng)
    shapes_ok = grid.cells.shape == (DEFAULT_ENV.horizon + 1, 3) and grid.traffic[0] == TrafficLevel.LIGHT
    s = featurize(grid, Position(0, START_LANE), PerceptionMask([CellType.CAR]))
    shapes_ok &= s.shape == (76,) and option_featurize(s, 1).shape == (78,)
    shapes_ok &= STATE_DIM == 76 and OPTION_DIM == 78
    return CheckResult("environment statistics", worst <= tol and bool(shapes_ok),
                       f"max cell-frequency deviation {worst:.4f} at {n_samples} samples per level; "
                       f"shapes {'ok' if shapes_ok else 'wrong'}")


# 10 -----------------------------------------------------------------------------

def brute_force_plan(grid: Grid, start_lane: int = START_LANE) -> float:
    best = np.inf
    for seq in itertools.product(range(3), repeat=grid.horizon):
        lane, ok = start_lane, True
        for a in seq:
            if not legal_mask(lane)[a]:
                ok = False
                break
            lane += a - 1
        if ok:
            best = min(best, path_cost(grid, seq, start_lane))
    return float(best)


def planner_fixtures(n_random: int = 200, seed: int = 10) -> list[Grid]:
    """Hand-made and random horizon-4 grids."""
    rng = np.random.default_rng(seed)
    grids = [Grid(np.zeros((5, 3), np.int8), np.ones(5, np.int8)),
             Grid(np.full((5, 3), CellType.CAR, np.int8), np.full(5, 2, np.int8)),
             Grid(np.array([[0, 0, 0], [3, 3, 0], [0, 3, 3], [3, 0, 3], [2, 1, 0]], np.int8), np.ones(5, np.int8))]
    grids += [generate_episode(rng, 4) for _ in range(n_random)]
    return grids


def planner_matches_brute_force(seed: int = 10) -> CheckResult:
    grids = planner_fixtures(seed=seed)
    bad = 0
    for g in grids:
        cost, actions = optimal_plan(g)
        bad += not (np.isclose(cost, brute_force_plan(g)) and np.isclose(path_cost(g, actions), cost))
    return CheckResult("planner vs brute force", bad == 0, f"{len(grids) - bad}/{len(grids)} horizon-4 fixtures agree")


ALL = (bellman_consistency, offline_gradient, emphasis_simulation, gradient_estimator_simulation,
       switching_gradient, online_gradient, critic_stability, approximator_gradients,
       environment_statistics, planner_matches_brute_force)


def run_all(report: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for check in ALL:
        r = check()
        report(r.line())
        results.append(r)
    return results
