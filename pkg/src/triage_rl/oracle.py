"""Exact computations on small tabular MDPs, used to validate the learners.

Conventions: ``p[s, a, s']`` is the transition tensor, ``c[s, a]`` the
environment cost, ``terminal[s]`` marks absorbing zero-cost states.  Every
linear solve uses the *transient* kernel, i.e. the mixture kernel with the
rows of terminal states zeroed, so ``I - P`` is invertible whenever
termination is sure.  Stationary distributions of episodic chains use the
restart construction: a terminal state jumps back to the initial
distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.sparse.csgraph import connected_components

from .gridworld import ContractViolation, Position
from .triage import HUMAN, MACHINE, machine_probability

MAX_CONDITION = 1e12


class SingularSystemError(ContractViolation):
    """A linear system the oracle needs is singular (termination is not sure)."""


class ReducibleChainError(ContractViolation):
    """The chain has more than one closed class, so no unique stationary law exists."""


@dataclass
class TabularMDP:
    p: np.ndarray
    c: np.ndarray
    terminal: np.ndarray
    control_costs: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.control_costs = np.asarray(self.control_costs, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        S, A = self.n_states, self.n_actions
        if self.p.shape != (S, A, S) or self.c.shape != (S, A) or self.terminal.shape != (S,):
            raise ContractViolation("inconsistent tabular shapes")
        if self.control_costs.shape != (2,) or self.initial.shape != (S,):
            raise ContractViolation("control costs need 2 entries and the initial law one per state")
        if np.any(self.p < 0) or not np.allclose(self.p.sum(axis=2), 1.0):
            raise ContractViolation("transition rows must be distributions")
        if not np.isclose(self.initial.sum(), 1.0) or np.any(self.initial < 0):
            raise ContractViolation("initial law must be a distribution")
        for s in np.flatnonzero(self.terminal):
            if not np.allclose(self.p[s, :, s], 1.0) or np.any(self.c[s] != 0):
                raise ContractViolation(f"terminal state {s} must self-loop at zero cost")

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p.shape[1]

    def to_dict(self) -> dict:
        return {"p": self.p.tolist(), "c": self.c.tolist(),
                "terminal": np.flatnonzero(self.terminal).tolist(),
                "control_costs": self.control_costs.tolist(), "initial": self.initial.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        p = np.asarray(doc["p"], dtype=float)
        terminal = np.zeros(p.shape[0], dtype=bool)
        terminal[doc["terminal"]] = True
        return cls(p, doc["c"], terminal, doc["control_costs"], doc["initial"])


@dataclass
class TabularPolicyPair:
    pi_h: np.ndarray
    pi_m: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.pi_h = np.asarray(self.pi_h, dtype=float)
        self.pi_m = np.asarray(self.pi_m, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        for name, pi in (("human", self.pi_h), ("machine", self.pi_m)):
            if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0):
                raise ContractViolation(f"{name} policy rows must be distributions")
        if np.any(self.tau < 0) or np.any(self.tau > 1):
            raise ContractViolation("tau must lie in [0, 1]")
        mix = self.mixture
        if np.any((mix > 0) & (self.pi_h <= 0)):
            raise ContractViolation("coverage: the human must support every action the mixture takes")

    @property
    def mixture(self) -> np.ndarray:
        t = self.tau[:, None]
        return t * self.pi_m + (1.0 - t) * self.pi_h

    def to_dict(self) -> dict:
        return {"pi_h": self.pi_h.tolist(), "pi_m": self.pi_m.tolist(), "tau": self.tau.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularPolicyPair":
        return cls(doc["pi_h"], doc["pi_m"], doc["tau"])


def save_fixture(path, mdp: TabularMDP, pair: TabularPolicyPair | None = None) -> None:
    doc = {"mdp": mdp.to_dict()}
    if pair is not None:
        doc["policies"] = pair.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_fixture(path) -> tuple[TabularMDP, TabularPolicyPair | None]:
    with open(path) as fh:
        doc = json.load(fh)
    pair = TabularPolicyPair.from_dict(doc["policies"]) if "policies" in doc else None
    return TabularMDP.from_dict(doc["mdp"]), pair


# -- kernels and linear systems ---------------------------------------------

def policy_kernel(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """``P(s, s') = sum_a pi(a|s) p(s'|s, a)``."""
    return np.einsum("sa,sat->st", pi, mdp.p)


def mixture_kernel(mdp: TabularMDP, pair: TabularPolicyPair) -> tuple[np.ndarray, np.ndarray]:
    """Kernel of the triage mixture and ``D = diag(tau)``."""
    return policy_kernel(mdp, pair.mixture), np.diag(pair.tau)


def transient(kernel: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """Zero the rows of terminal states."""
    out = kernel.copy()
    out[terminal] = 0.0
    return out


def solve(a: np.ndarray, b: np.ndarray, what: str = "system") -> np.ndarray:
    """Dense solve that refuses ill-conditioned systems."""
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystemError(f"{what} is singular (condition number {cond:.3g}); "
                                  "termination is not sure under this policy")
    return np.linalg.solve(a, b)


class ExactValues(NamedTuple):
    v: np.ndarray
    q: np.ndarray
    Q: np.ndarray
    condition: float


def exact_values(mdp: TabularMDP, pair: TabularPolicyPair) -> ExactValues:
    """State values, action values and option values of a fixed triage pair.

    ``Q[s, d]`` is zero on terminal states, where nobody acts.
    """
    tau, nt = pair.tau, ~mdp.terminal
    mix = pair.mixture
    P = transient(policy_kernel(mdp, mix), mdp.terminal)
    cc = mdp.control_costs
    r = np.where(nt, tau * cc[MACHINE] + (1 - tau) * cc[HUMAN] + np.sum(mix * mdp.c, axis=1), 0.0)
    a = np.eye(mdp.n_states) - P
    v = solve(a, r, "(I - P) v = r")
    q = np.where(nt[:, None], mdp.c + mdp.p @ v, 0.0)
    Q = np.stack([cc[HUMAN] + np.sum(pair.pi_h * q, axis=1),
                  cc[MACHINE] + np.sum(pair.pi_m * q, axis=1)], axis=1)
    Q[mdp.terminal] = 0.0
    return ExactValues(v, q, Q, float(np.linalg.cond(a)))


def bellman_residual(mdp: TabularMDP, pair: TabularPolicyPair, values: ExactValues) -> float:
    """Sup-norm residual of the value and action-value equations."""
    nt = ~mdp.terminal
    mix, tau, cc = pair.mixture, pair.tau, mdp.control_costs
    v_rhs = tau * cc[MACHINE] + (1 - tau) * cc[HUMAN] + np.sum(mix * values.q, axis=1)
    q_rhs = mdp.c + np.einsum("sat,t->sa", mdp.p, values.v)
    r1 = np.max(np.abs((values.v - v_rhs)[nt]), initial=0.0)
    r2 = np.max(np.abs((values.q - q_rhs)[nt]), initial=0.0)
    r3 = np.max(np.abs(values.v[mdp.terminal]), initial=0.0)
    return float(max(r1, r2, r3))


def restart_kernel(mdp: TabularMDP, kernel: np.ndarray) -> np.ndarray:
    """Episodic kernel made recurrent: terminal states jump to the initial law."""
    out = kernel.copy()
    out[mdp.terminal] = mdp.initial
    return out


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    """Unique left eigenvector with eigenvalue 1, normalized to sum 1."""
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.shape[0]
    n_comp, _ = connected_components(kernel > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise ReducibleChainError(f"chain splits into {n_comp} communicating classes")
    a = kernel.T - np.eye(n)
    a[-1] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    d = solve(a, b, "stationary system")
    return np.clip(d, 0.0, None) / np.clip(d, 0.0, None).sum()


def human_stationary(mdp: TabularMDP, pi_h: np.ndarray) -> np.ndarray:
    """Stationary law of the human alone on the restart chain."""
    return stationary_distribution(restart_kernel(mdp, policy_kernel(mdp, pi_h)))


def emphatic_weightings(d: np.ndarray, P: np.ndarray, D: np.ndarray) -> np.ndarray:
    """``m = (I - P^T)^{-1} D d``; pass the transient kernel for episodic tasks."""
    return solve(np.eye(P.shape[0]) - P.T, D @ d, "(I - P^T) m = D d")


# -- tabular softmax machine policy -------------------------------------------

def softmax_policy(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_weighted_grad(pi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``[s, b] -> sum_a d pi(a|s) / d theta[s, b] * weights[s, a]``."""
    return pi * (weights - np.sum(pi * weights, axis=1, keepdims=True))


def _pair(pi_h, theta, tau) -> TabularPolicyPair:
    return TabularPolicyPair(pi_h, softmax_policy(theta), tau)


def offline_objective(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray, tau: np.ndarray,
                      d_h: np.ndarray | None = None) -> float:
    """Mean value under the human's stationary law, for a fixed ``tau``."""
    if d_h is None:
        d_h = human_stationary(mdp, pi_h)
    return float(d_h @ exact_values(mdp, _pair(pi_h, theta, tau)).v)


def exact_offline_gradient(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray,
                           tau: np.ndarray, d_h: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``offline_objective`` for a tabular softmax machine, shaped like ``theta``.

    ``sum_s w(s) sum_a d pi_M(a|s)/d theta * q(s, a)`` with state weights
    ``w = D (I - P^T)^{-1} d_H``: the triage probability multiplies at the
    state where the machine acts.  This coincides with ``emphatic_gradient``
    whenever ``tau`` is constant over the transient states.
    """
    if d_h is None:
        d_h = human_stationary(mdp, pi_h)
    pair = _pair(pi_h, theta, tau)
    q = exact_values(mdp, pair).q
    P, D = mixture_kernel(mdp, pair)
    follow_on = emphatic_weightings(d_h, transient(P, mdp.terminal), np.eye(mdp.n_states))
    return (pair.tau * follow_on)[:, None] * softmax_weighted_grad(pair.pi_m, q)


def emphatic_gradient(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray,
                      tau: np.ndarray, d_h: np.ndarray | None = None) -> np.ndarray:
    """``sum_s m(s) sum_a d pi_M(a|s)/d theta * q(s, a)`` with ``m`` from ``emphatic_weightings``.

    This is the long-run mean of the ``M_t rho_t delta_t grad ln pi_M`` estimator.
    """
    if d_h is None:
        d_h = human_stationary(mdp, pi_h)
    pair = _pair(pi_h, theta, tau)
    q = exact_values(mdp, pair).q
    P, D = mixture_kernel(mdp, pair)
    m = emphatic_weightings(d_h, transient(P, mdp.terminal), D)
    return m[:, None] * softmax_weighted_grad(pair.pi_m, q)


def visit_counts(mdp: TabularMDP, pair: TabularPolicyPair, start: np.ndarray) -> np.ndarray:
    """Expected visits ``eta = (I - P^T)^{-1} start`` before termination."""
    P, _ = mixture_kernel(mdp, pair)
    return solve(np.eye(mdp.n_states) - transient(P, mdp.terminal).T, start, "(I - P^T) eta = mu")


def online_objective(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray, tau: np.ndarray,
                     start: np.ndarray | None = None) -> float:
    """Expected episode cost of the mixture from ``start`` (default: the initial law)."""
    start = mdp.initial if start is None else start
    return float(start @ exact_values(mdp, _pair(pi_h, theta, tau)).v)


def exact_online_gradient(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray, tau: np.ndarray,
                          start: np.ndarray | None = None) -> np.ndarray:
    """Policy-gradient form: ``sum_s eta(s) tau(s) sum_a pi_M(a|s) q(s,a) grad ln pi_M(a|s)``."""
    start = mdp.initial if start is None else start
    pair = _pair(pi_h, theta, tau)
    q = exact_values(mdp, pair).q
    eta = visit_counts(mdp, pair, start)
    return (eta * tau)[:, None] * softmax_weighted_grad(pair.pi_m, q)


def on_policy_stationary(mdp: TabularMDP, pair: TabularPolicyPair) -> np.ndarray:
    """Stationary law of the mixture on the restart chain."""
    P, _ = mixture_kernel(mdp, pair)
    return stationary_distribution(restart_kernel(mdp, P))


# -- epsilon-greedy triage ------------------------------------------------------

def greedy_tau(Q: np.ndarray, eps: float, terminal: np.ndarray) -> np.ndarray:
    tau = np.array([machine_probability(q0, q1, eps) for q0, q1 in Q])
    tau[terminal] = 0.0
    return tau


def epsilon_greedy_tau(mdp: TabularMDP, pi_h: np.ndarray, pi_m: np.ndarray, eps: float,
                       tau0: np.ndarray | None = None, max_iter: int = 200) -> tuple[np.ndarray, ExactValues]:
    """Self-consistent triage: ``tau`` epsilon-greedy on its own option values.

    Found by policy iteration from ``tau0`` (default: machine everywhere).
    """
    tau = greedy_tau(np.zeros((mdp.n_states, 2)), eps, mdp.terminal) if tau0 is None else np.asarray(tau0, float)
    seen = set()
    for _ in range(max_iter):
        values = exact_values(mdp, TabularPolicyPair(pi_h, pi_m, tau))
        new = greedy_tau(values.Q, eps, mdp.terminal)
        if np.array_equal(new, tau):
            return tau, values
        key = new.tobytes()
        if key in seen:
            raise ContractViolation("epsilon-greedy iteration cycles; no fixed point reached")
        seen.add(key)
        tau = new
    raise ContractViolation("epsilon-greedy iteration did not converge")


def greedy_objective(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray, eps: float,
                     d_h: np.ndarray | None = None, tau0=None) -> tuple[float, np.ndarray]:
    """Offline objective with the triage following the option values it induces."""
    if d_h is None:
        d_h = human_stationary(mdp, pi_h)
    tau, values = epsilon_greedy_tau(mdp, pi_h, softmax_policy(theta), eps, tau0)
    return float(d_h @ values.v), tau


def option_gap(mdp: TabularMDP, pi_h: np.ndarray, theta: np.ndarray, eps: float, tau0=None) -> np.ndarray:
    """``Q(s, 1) - Q(s, 0)`` at the self-consistent triage."""
    _, values = epsilon_greedy_tau(mdp, pi_h, softmax_policy(theta), eps, tau0)
    return values.Q[:, MACHINE] - values.Q[:, HUMAN]


def find_crossing(gap_of: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12):
    """Bisect a sign change of ``gap_of`` on ``[lo, hi]``; returns the final bracket."""
    g_lo, g_hi = gap_of(lo), gap_of(hi)
    if np.sign(g_lo) == np.sign(g_hi):
        raise ValueError("gap does not change sign on the bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        g = gap_of(mid)
        if np.sign(g) == np.sign(g_lo):
            lo, g_lo = mid, g
        else:
            hi = mid
    return lo, hi


# -- emphatic critic stability -------------------------------------------------

class Stability(NamedTuple):
    A: np.ndarray
    K: np.ndarray
    positive_definite: bool
    min_eigenvalue: float
    column_sums: np.ndarray
    expected_column_sums: np.ndarray


def stability_matrix(mdp: TabularMDP, pair: TabularPolicyPair, phi0: np.ndarray, phi1: np.ndarray,
                     interest: np.ndarray, d_h: np.ndarray | None = None) -> Stability:
    """Key matrix ``A = Phi^T F (I - P) Phi`` of the emphatic critic."""
    if d_h is None:
        d_h = human_stationary(mdp, pair.pi_h)
    P, D = mixture_kernel(mdp, pair)
    Pt = transient(P, mdp.terminal)
    Di = np.diag(np.asarray(interest, dtype=float))
    f = solve(np.eye(mdp.n_states) - Pt.T, Di @ d_h, "(I - P^T) f = D_i d")
    K = np.diag(f) @ (np.eye(mdp.n_states) - Pt)
    phi = D @ phi1 + (np.eye(mdp.n_states) - D) @ phi0
    A = phi.T @ K @ phi
    lam = float(np.min(np.linalg.eigvalsh(0.5 * (A + A.T))))
    return Stability(A, K, lam > 0.0, lam, K.sum(axis=0), d_h @ Di)


def row_column_criterion(K: np.ndarray) -> bool:
    """Positive diagonal, nonpositive off-diagonal, every row sum plus column sum positive."""
    off = K - np.diag(np.diag(K))
    return bool(np.all(np.diag(K) > 0) and np.all(off <= 0) and np.all(K.sum(0) + K.sum(1) > 0))


def symmetric_min_eigenvalue(K: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(0.5 * (K + K.T))))


# -- random instances ------------------------------------------------------------

def random_mdp(rng: np.random.Generator, n_states: int = 6, n_actions: int = 3,
               n_terminal: int = 1, stop: float = 0.2, control_costs=(0.0, 0.0)) -> TabularMDP:
    """Dense random MDP; every transient state terminates with probability >= ``stop``.

    The last ``n_terminal`` states are terminal.
    """
    n_t = n_states - n_terminal
    if n_t < 1 or n_terminal < 1:
        raise ValueError("need at least one transient and one terminal state")
    p = np.zeros((n_states, n_actions, n_states))
    body = rng.dirichlet(np.ones(n_states), size=(n_t, n_actions))
    p[:n_t] = (1 - stop) * body
    p[:n_t, :, n_t:] += stop / n_terminal
    for s in range(n_t, n_states):
        p[s, :, s] = 1.0
    c = np.zeros((n_states, n_actions))
    c[:n_t] = rng.uniform(0.0, 5.0, size=(n_t, n_actions))
    terminal = np.arange(n_states) >= n_t
    initial = np.zeros(n_states)
    initial[:n_t] = rng.dirichlet(np.ones(n_t))
    return TabularMDP(p, c, terminal, np.asarray(control_costs, float), initial)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, floor: float = 0.05) -> np.ndarray:
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    pi = floor + (1 - floor * n_actions) * pi
    return pi / pi.sum(axis=1, keepdims=True)


def chain_mdp(control_costs=(0.0, 0.0)) -> TabularMDP:
    """Three transient states in a row plus a terminal state.

    Action 0 moves back, 1 stays, 2 moves forward; moving forward from the last
    state terminates.  Costs grow with the state index.
    """
    S, A = 4, 3
    p = np.zeros((S, A, S))
    for s in range(3):
        back, fwd = max(s - 1, 0), s + 1
        p[s, 0, back] += 0.8
        p[s, 0, fwd] += 0.2
        p[s, 1, s] += 0.6
        p[s, 1, fwd] += 0.4
        p[s, 2, fwd] += 0.9
        p[s, 2, back] += 0.1
    p[3, :, 3] = 1.0
    c = np.array([[1.0, 2.0, 0.5], [2.0, 1.0, 3.0], [0.5, 3.0, 1.0], [0.0, 0.0, 0.0]])
    return TabularMDP(p, c, np.array([False, False, False, True]), np.asarray(control_costs, float),
                      np.array([1.0, 0.0, 0.0, 0.0]))


# -- Monte Carlo simulators (vectorized over episodes) --------------------------

def _draw(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    u = rng.random(probs.shape[0])[:, None]
    idx = (np.cumsum(probs, axis=1) < u * probs.sum(axis=1, keepdims=True)).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def simulate_returns(mdp: TabularMDP, pair: TabularPolicyPair, starts: np.ndarray,
                     rng: np.random.Generator, max_steps: int = 100_000) -> np.ndarray:
    """Total cost (environment plus control) of one episode from each start state."""
    s = np.asarray(starts, dtype=np.int64).copy()
    total = np.zeros(len(s))
    cc = mdp.control_costs
    for _ in range(max_steps):
        live = ~mdp.terminal[s]
        if not live.any():
            return total
        idx = np.flatnonzero(live)
        st = s[idx]
        d = rng.random(len(idx)) < pair.tau[st]
        pi = np.where(d[:, None], pair.pi_m[st], pair.pi_h[st])
        a = _draw(rng, pi)
        total[idx] += mdp.c[st, a] + np.where(d, cc[MACHINE], cc[HUMAN])
        s[idx] = _draw(rng, mdp.p[st, a])
    raise ContractViolation("episodes did not terminate")


def simulate_chain(kernel: np.ndarray, n_chains: int, n_steps: int, rng: np.random.Generator,
                   start: np.ndarray | None = None, burn_in: int = 0) -> np.ndarray:
    """Visit counts of ``n_chains`` parallel copies of a Markov chain."""
    n = kernel.shape[0]
    s = np.zeros(n_chains, dtype=np.int64) if start is None else _draw(rng, np.tile(start, (n_chains, 1)))
    counts = np.zeros(n, dtype=np.int64)
    for t in range(burn_in + n_steps):
        s = _draw(rng, kernel[s])
        if t >= burn_in:
            counts += np.bincount(s, minlength=n)
    return counts


class EmphasisEstimate(NamedTuple):
    """Renewal-reward estimates with delta-method standard errors.

    ``m``: long-run mean of ``M_t 1[s_t = s]``.  ``gradient``: of
    ``M_t rho_t delta_t grad ln pi_M``.  ``follow_on_gradient``: of
    ``d_t F_t rho_t delta_t grad ln pi_M`` with ``F_t = 1 + varrho_{t-1} F_{t-1}``.
    """

    m: np.ndarray
    m_se: np.ndarray
    gradient: np.ndarray
    gradient_se: np.ndarray
    follow_on_gradient: np.ndarray
    follow_on_gradient_se: np.ndarray
    steps: int


def simulate_emphasis(mdp: TabularMDP, pair: TabularPolicyPair, v: np.ndarray, n_steps: int,
                      rng: np.random.Generator, ratio: str = "sampled",
                      batch: int = 20_000) -> EmphasisEstimate:
    """Run the human alone on the restart chain and track the emphatic traces.

    ``ratio="sampled"`` builds ``varrho_t`` from the drawn controller ``d_t``;
    ``"expected"`` uses the mixture ``tau pi_M + (1 - tau) pi_H`` instead.  The
    TD error uses the exact values ``v``.  Each episode ends with one visit to
    its terminal state and the traces restart with the next episode.  Episodes
    are iid, so long-run means are ratios of per-episode sums to lengths.
    """
    if ratio not in ("sampled", "expected"):
        raise ValueError(f"unknown ratio mode {ratio!r}")
    S, A = mdp.n_states, mdp.n_actions
    ys, gs, fs, ls = [], [], [], []
    steps = 0
    while steps < n_steps:
        s = _draw(rng, np.tile(mdp.initial, (batch, 1)))
        M = np.zeros(batch)
        F = np.zeros(batch)
        prev_ratio = np.ones(batch)
        y = np.zeros((batch, S))
        g = np.zeros((batch, S, A))
        gf = np.zeros((batch, S, A))
        length = np.zeros(batch)
        live = np.ones(batch, dtype=bool)
        while live.any():
            idx = np.flatnonzero(live)
            st = s[idx]
            d = (rng.random(len(idx)) < pair.tau[st]).astype(float)
            M[idx] = d + prev_ratio[idx] * M[idx]
            F[idx] = 1.0 + prev_ratio[idx] * F[idx]
            y[idx, st] += M[idx]
            length[idx] += 1
            done = mdp.terminal[st]
            act = idx[~done]
            sa = st[~done]
            a = _draw(rng, pair.pi_h[sa])
            s_next = _draw(rng, mdp.p[sa, a])
            ph, pm = pair.pi_h[sa, a], pair.pi_m[sa, a]
            dd = d[~done]
            w_mix = pair.tau[sa] if ratio == "expected" else dd
            prev_ratio[act] = (w_mix * pm + (1 - w_mix) * ph) / ph
            base = (pm / ph) * (mdp.c[sa, a] + v[s_next] - v[sa])
            # grad ln pi_M(a|s) for a tabular softmax: e_a - pi_M(.|s) in row s
            glog = -pair.pi_m[sa]
            glog[np.arange(len(a)), a] += 1.0
            g[act, sa] += (M[act] * base)[:, None] * glog
            gf[act, sa] += (dd * F[act] * base)[:, None] * glog
            s[act] = s_next
            live[idx[done]] = False
        steps += int(length.sum())
        ys.append(y)
        gs.append(g.reshape(batch, -1))
        fs.append(gf.reshape(batch, -1))
        ls.append(length)
    length = np.concatenate(ls)
    m, m_se = _ratio(np.concatenate(ys), length)
    grad, grad_se = _ratio(np.concatenate(gs), length)
    fgrad, fgrad_se = _ratio(np.concatenate(fs), length)
    return EmphasisEstimate(m, m_se, grad.reshape(S, A), grad_se.reshape(S, A),
                            fgrad.reshape(S, A), fgrad_se.reshape(S, A), steps)


def _ratio(y: np.ndarray, length: np.ndarray):
    n = len(length)
    mean_l = length.mean()
    r = y.mean(axis=0) / mean_l
    resid = y - r * length[:, None]
    se = resid.std(axis=0, ddof=1) / (mean_l * np.sqrt(n))
    return r, se


# -- a tabular environment with the driving environment's interface -------------

def tabular_option_features(n_states: int):
    """One-hot over (state, controller) for a tabular option-value critic."""
    def features(s: np.ndarray, d: int) -> np.ndarray:
        x = np.zeros(2 * n_states)
        x[2 * int(np.argmax(s)) + int(d)] = 1.0
        return x
    return features


class TabularEnv:
    """Runs a ``TabularMDP`` under the episode protocol of the online trainer.

    States are one-hot vectors for both actor and critic.  ``pos.lane`` holds
    the state index so episode paths can be recorded the same way.
    """

    horizon = None

    def __init__(self, mdp: TabularMDP, pi_h: np.ndarray, rng: np.random.Generator,
                 max_steps: int = 10_000):
        self.mdp, self.pi_h, self.rng = mdp, np.asarray(pi_h, dtype=float), rng
        self.max_steps = max_steps
        self.state = 0
        self.steps = 0

    def reset(self, grid=None) -> None:
        """``grid`` optionally fixes the start state."""
        self.state = int(_draw(self.rng, self.mdp.initial[None])[0]) if grid is None else int(grid)
        self.steps = 0

    @property
    def pos(self) -> Position:
        return Position(self.steps, self.state)

    @property
    def done(self) -> bool:
        return bool(self.mdp.terminal[self.state])

    def _onehot(self) -> np.ndarray:
        x = np.zeros(self.mdp.n_states)
        x[self.state] = 1.0
        return x

    critic_state = actor_state = _onehot

    def legal(self) -> np.ndarray:
        return np.ones(self.mdp.n_actions, dtype=bool)

    def human_distribution(self, just_switched: bool) -> np.ndarray:
        return self.pi_h[self.state]

    def step(self, action: int) -> float:
        if self.done:
            raise ContractViolation("episode already terminated")
        if self.steps >= self.max_steps:
            raise ContractViolation("episode exceeded the step budget")
        cost = float(self.mdp.c[self.state, action])
        self.state = int(_draw(self.rng, self.mdp.p[self.state, action][None])[0])
        self.steps += 1
        return cost


def tabular_dataset(mdp: TabularMDP, pi_h: np.ndarray, n_episodes: int, rng: np.random.Generator,
                    max_steps: int = 10_000):
    """Human-alone episodes as ``PreparedTrajectory`` records with one-hot states."""
    from .offline import PreparedTrajectory

    eye = np.eye(mdp.n_states)
    out = []
    for _ in range(n_episodes):
        s = int(_draw(rng, mdp.initial[None])[0])
        states, actions, costs = [s], [], []
        while not mdp.terminal[s]:
            if len(actions) >= max_steps:
                raise ContractViolation("episode exceeded the step budget")
            a = int(_draw(rng, pi_h[s][None])[0])
            costs.append(mdp.c[s, a])
            s = int(_draw(rng, mdp.p[s, a][None])[0])
            actions.append(a)
            states.append(s)
        if not actions:
            continue
        st = np.asarray(states)
        acts = np.asarray(actions)
        out.append(PreparedTrajectory(eye[st], eye[st[:-1]], np.ones((len(acts), mdp.n_actions), dtype=bool),
                                      acts, np.asarray(costs), pi_h[st[:-1], acts], True))
    return out
