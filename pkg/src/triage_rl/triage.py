"""Option-value critic and the epsilon-greedy triage policy built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .approximator import FeedForwardNet, RmsProp, TargetSnapshot, net_from_dict, net_to_dict, optimizer_from_state
from .perception import option_featurize

HUMAN, MACHINE = 0, 1


class OptionValueCritic:
    """``Q(s, d) = net(phi(s, d)) + control_cost[d]``.

    The control cost is an exact additive constant and carries no gradient.
    ``option_features`` maps (state, d) to the net input; the default appends
    the two controller bits.  A live net is trained; ``target`` is a frozen
    snapshot used for bootstrap values.
    """

    def __init__(self, net, control_costs=(0.0, 0.0), sync_interval: int = 5000,
                 optimizer=None, option_features=None):
        self.net = net
        self.control_costs = np.asarray(control_costs, dtype=float)
        self.target = TargetSnapshot(net, sync_interval)
        self.optimizer = optimizer if optimizer is not None else RmsProp(net.params.size)
        self.option_features = option_features or option_featurize
        self._pair_kernel = (option_features is None and isinstance(net, FeedForwardNet)
                             and net.n_out == 1)

    def _values(self, net, s) -> np.ndarray:
        if self._pair_kernel:
            if s.shape[0] + 2 != net.n_in:
                raise ValueError(f"state has {s.shape[0]} features, critic expects {net.n_in - 2}")
            _, _, q0, q1 = _kernels.option_pair_forward(net.params, s, net.n_hidden)
            raw = np.array([q0, q1])
        else:
            raw = np.array([net.forward(self.option_features(s, d))[0] for d in (HUMAN, MACHINE)])
        return raw + self.control_costs

    def values(self, s: np.ndarray) -> np.ndarray:
        """Live ``[Q(s, human), Q(s, machine)]``."""
        return self._values(self.net, s)

    def target_values(self, s: np.ndarray) -> np.ndarray:
        return self._values(self.target.net, s)

    def q_value(self, s: np.ndarray, d: int) -> float:
        return float(self.values(s)[d])

    def td_step(self, s: np.ndarray, d: int, td_target: float, weight: float = 1.0) -> float:
        """One semi-gradient step of ``weight * (td_target - Q(s,d))``; returns the TD error."""
        x = self.option_features(s, d)
        out, cache = self.net.forward_cached(x)
        delta = td_target - (out[0] + self.control_costs[d])
        if not math.isfinite(delta):
            raise FloatingPointError(f"non-finite critic TD error (target={td_target})")
        scale = weight * delta
        if scale != 0.0:
            grad = self.net.backward(x, cache, np.array([-scale]))
            self.optimizer.step(self.net.params, grad)
        self.target.tick(self.net)
        return delta

    def state_dict(self) -> dict:
        return {
            "net": net_to_dict(self.net),
            "target": net_to_dict(self.target.net),
            "target_ticks": self.target.ticks,
            "sync_interval": self.target.sync_interval,
            "control_costs": self.control_costs.tolist(),
            "optimizer": self.optimizer.state_dict(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "OptionValueCritic":
        critic = cls(net_from_dict(state["net"]), state["control_costs"], state["sync_interval"],
                     optimizer=optimizer_from_state(state["optimizer"]))
        critic.target.net = net_from_dict(state["target"])
        critic.target.ticks = state["target_ticks"]
        return critic


def q_value(critic: OptionValueCritic, s: np.ndarray, d: int) -> float:
    return critic.q_value(s, d)


def machine_probability(q0: float, q1: float, eps: float) -> float:
    """Probability that the epsilon-greedy triage hands control to the machine.

    Ties go to the machine.
    """
    return 1.0 - eps / 2.0 if q1 <= q0 else eps / 2.0


def decide(q0: float, q1: float, eps: float, u: float) -> int:
    """Triage draw from a uniform ``u`` in [0, 1)."""
    return MACHINE if u < machine_probability(q0, q1, eps) else HUMAN


def triage_decide(q0: float, q1: float, eps: float, rng: np.random.Generator) -> int:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    return decide(q0, q1, eps, rng.random())


STAGES = ("offline_first_half", "offline_second_half", "online")


@dataclass(frozen=True)
class EpsilonSchedule:
    offline_first: float = 0.2
    offline_second: float = 0.1
    online_start: float = 0.1
    online_period: int = 1000  # episodes per unit of the decay clock


def epsilon_at(schedule: EpsilonSchedule, stage: str, t: int, n_offline: int | None = None) -> float:
    """Exploration rate for 1-based episode ``t``.

    ``stage="offline"`` picks the half from ``t`` and ``n_offline``; online
    decays as ``online_start / sqrt(k)`` with ``k = ceil(t / online_period)``.
    """
    if t < 1:
        raise ValueError("episode index is 1-based")
    if stage == "offline":
        if n_offline is None:
            raise ValueError("offline stage needs the total number of offline episodes")
        stage = "offline_first_half" if t <= n_offline / 2 else "offline_second_half"
    if stage == "offline_first_half":
        return schedule.offline_first
    if stage == "offline_second_half":
        return schedule.offline_second
    if stage == "online":
        return schedule.online_start / math.sqrt(-(-t // schedule.online_period))
    raise ValueError(f"unknown stage {stage!r}")
