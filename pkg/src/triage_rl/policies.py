"""Human simulators, the machine softmax policy and their mixtures.

Action distributions are plain length-3 arrays indexed by ``Action``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable

import numpy as np

from . import _kernels
from .approximator import RmsProp
from .gridworld import DEFAULT_ENV, EnvConfig, Grid, Position
from .perception import PERFECT, PerceptionMask

log = logging.getLogger(__name__)

COVERAGE_FLOOR = 1e-6


@dataclass(frozen=True)
class HumanPolicyConfig:
    mask: PerceptionMask = PERFECT
    switch_blindness: PerceptionMask = PERFECT

    def effective_mask(self, just_switched: bool) -> PerceptionMask:
        return self.mask.union(self.switch_blindness) if just_switched else self.mask


def human_action_distribution(grid: Grid, pos: Position, config: HumanPolicyConfig,
                              just_switched: bool = False,
                              env: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    if pos.row >= grid.horizon:
        raise ValueError("no action is taken at the final row")
    blind = config.effective_mask(just_switched).as_array()
    return _kernels.human_probs(grid.cells, pos.row, pos.lane, blind, env.cell_costs)


def masked_softmax(logits: np.ndarray, legal: np.ndarray) -> np.ndarray:
    return _kernels.masked_softmax(np.asarray(logits, dtype=float), np.asarray(legal, dtype=np.bool_))


def machine_action_distribution(actor, s: np.ndarray, legal) -> np.ndarray:
    """Softmax of the actor's logits over the legal actions only."""
    legal = np.asarray(legal, dtype=np.bool_)
    logits = actor.forward(s)
    if logits.shape != legal.shape:
        raise ValueError(f"actor emits {logits.shape[0]} logits for {legal.shape[0]} actions")
    return masked_softmax(logits, legal)


def overall_action_distribution(tau: float, pi_machine: np.ndarray, pi_human: np.ndarray) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"triage probability must lie in [0, 1], got {tau}")
    return tau * np.asarray(pi_machine) + (1.0 - tau) * np.asarray(pi_human)


def sample_action(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from ``probs`` with a uniform ``u``."""
    cdf = np.cumsum(probs)
    a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # never land on a zero-probability tail entry through round-off
    while probs[min(a, len(probs) - 1)] == 0.0:
        a -= 1
    return min(a, len(probs) - 1)


def floored_human_prob(p: float, floor: float = COVERAGE_FLOOR) -> float:
    """Human probability used in importance-ratio denominators."""
    if p <= 0.0:
        log.warning("coverage violated: human probability %g on a taken action, flooring at %g", p, floor)
        return floor
    return p


@dataclass
class EmpiricalHumanPolicy:
    """Monte-Carlo estimate of the human policy from visit counts."""

    n_actions: int = 3
    counts: dict = field(default_factory=dict)

    def add(self, key: Hashable, action: int) -> None:
        row = self.counts.get(key)
        if row is None:
            row = self.counts[key] = np.zeros(self.n_actions, dtype=np.int64)
        row[action] += 1

    def visits(self, key: Hashable) -> int:
        row = self.counts.get(key)
        return 0 if row is None else int(row.sum())

    def distribution(self, key: Hashable) -> np.ndarray | None:
        """Estimated action probabilities, or ``None`` for an unseen state."""
        row = self.counts.get(key)
        if row is None:
            return None
        return row / row.sum()

    def prob(self, key: Hashable, action: int) -> float | None:
        dist = self.distribution(key)
        return None if dist is None else float(dist[action])


def estimate_human_policy(pairs: Iterable[tuple[Hashable, int]], n_actions: int = 3) -> EmpiricalHumanPolicy:
    """Count (state key, action) pairs into an empirical policy."""
    est = EmpiricalHumanPolicy(n_actions=n_actions)
    seen = False
    for key, action in pairs:
        est.add(key, int(action))
        seen = True
    if not seen:
        raise ValueError("cannot estimate a policy from an empty dataset")
    return est


def entropy_bonus(dist: np.ndarray, w: float, legal=None) -> tuple[float, np.ndarray]:
    """``w * H(dist)`` and its gradient with respect to the softmax logits.

    The gradient is ``-w * p_j (ln p_j + H)``; entries outside ``legal`` are zero.
    """
    if w < 0:
        raise ValueError("entropy weight must be nonnegative")
    p = np.asarray(dist, dtype=float)
    support = p > 0 if legal is None else np.asarray(legal, dtype=np.bool_)
    logp = np.zeros_like(p)
    logp[support] = np.log(p[support])
    h = -float(np.sum(p[support] * logp[support]))
    grad = np.where(support, -w * p * (logp + h), 0.0)
    return w * h, grad


class Actor:
    """Machine policy: softmax over legal actions of a net's logits."""

    def __init__(self, net, optimizer=None):
        self.net = net
        self.optimizer = optimizer if optimizer is not None else RmsProp(net.params.size)

    def distribution(self, s: np.ndarray, legal) -> np.ndarray:
        return machine_action_distribution(self.net, s, legal)

    def distribution_cached(self, s, legal):
        logits, cache = self.net.forward_cached(s)
        return masked_softmax(logits, legal), cache

    def log_prob_grad(self, s, legal, action: int) -> np.ndarray:
        """Gradient of ``ln pi(action | s)`` with respect to the parameters."""
        probs, cache = self.distribution_cached(s, legal)
        g = -probs
        g[action] += 1.0
        return self.net.backward(s, cache, np.where(legal, g, 0.0))

    def policy_step(self, s, legal, action: int, weight: float, entropy_weight: float = 0.0,
                    cached=None) -> None:
        """Descend ``weight * ln pi(action|s) - entropy_weight * H(pi(.|s))``."""
        if not np.isfinite(weight):
            raise FloatingPointError(f"non-finite actor weight {weight}")
        legal = np.asarray(legal, dtype=np.bool_)
        probs, cache = cached if cached is not None else self.distribution_cached(s, legal)
        g = -weight * probs
        g[action] += weight
        if entropy_weight > 0.0:
            g -= entropy_bonus(probs, entropy_weight, legal)[1]
        g = np.where(legal, g, 0.0)
        if not np.any(g):
            return
        self.optimizer.step(self.net.params, self.net.backward(s, cache, g))
