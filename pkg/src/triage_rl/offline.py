"""Offline off-policy actor-critic on recorded human-alone trajectories.

The critic follows emphatic TD(0) with follow-on trace ``F`` and the actor
follows the emphatic policy gradient with trace ``M``; both traces are driven
by the ratio between the triage mixture and the human policy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .gridworld import DEFAULT_ENV, START_LANE, Action, EnvConfig, Grid, Position, generate_episode, legal_mask, step
from .perception import PERFECT, PerceptionMask, featurize_path
from .policies import (COVERAGE_FLOOR, Actor, EmpiricalHumanPolicy, HumanPolicyConfig,
                       human_action_distribution, sample_action)
from .triage import HUMAN, MACHINE, OptionValueCritic, machine_probability

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """One human-alone episode: the true grid, visited lanes, actions, costs."""

    grid: Grid
    lanes: np.ndarray
    actions: np.ndarray
    costs: np.ndarray

    def __len__(self):
        return len(self.actions)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "steps": [
                {"row": t, "lane": int(self.lanes[t]), "action": Action(int(a)).name.lower(),
                 "cost": float(c)}
                for t, (a, c) in enumerate(zip(self.actions, self.costs))
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, env: EnvConfig = DEFAULT_ENV) -> "Trajectory":
        grid = Grid.from_dict(doc["grid"])
        steps = doc["steps"]
        actions = np.array([Action[s["action"].upper()] for s in steps], dtype=np.int64)
        lanes = [START_LANE]
        costs = []
        pos = Position(0, START_LANE)
        for s, a in zip(steps, actions):
            if s["row"] != pos.row or s["lane"] != pos.lane:
                raise ValueError(f"step {s} inconsistent with grid dynamics")
            pos, cost, _ = step(grid, pos, Action(a), env)
            lanes.append(pos.lane)
            costs.append(cost)
        if not np.allclose(costs, [s["cost"] for s in steps]):
            raise ValueError("recorded costs do not match the grid")
        return cls(grid, np.array(lanes, dtype=np.int64), actions, np.array(costs))


def collect_human_dataset(n_episodes: int, human: HumanPolicyConfig, rng: np.random.Generator,
                          env: EnvConfig = DEFAULT_ENV) -> list[Trajectory]:
    """Roll out the human alone; no switching happens, so switch blindness stays off."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    out = []
    for _ in range(n_episodes):
        grid = generate_episode(rng, env.horizon, env)
        pos = Position(0, START_LANE)
        lanes, actions, costs = [pos.lane], [], []
        u = rng.random(grid.horizon)
        for t in range(grid.horizon):
            a = sample_action(human_action_distribution(grid, pos, human, False, env), u[t])
            pos, cost, _ = step(grid, pos, Action(a), env)
            lanes.append(pos.lane)
            actions.append(a)
            costs.append(cost)
        out.append(Trajectory(grid, np.array(lanes), np.array(actions), np.array(costs)))
    return out


def write_dataset(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict()) + "\n")


def read_dataset(path, env: EnvConfig = DEFAULT_ENV) -> list[Trajectory]:
    with open(path) as fh:
        return [Trajectory.from_dict(json.loads(line), env) for line in fh if line.strip()]


@dataclass
class PreparedTrajectory:
    """Arrays the trainer consumes, independent of the world that produced them.

    ``critic_states`` has one more row than there are steps (the last state).
    ``human_probs`` is the human probability of each recorded action.
    """

    critic_states: np.ndarray
    actor_states: np.ndarray
    legal: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    human_probs: np.ndarray
    terminal_last: bool = True

    def __len__(self):
        return len(self.actions)


def prepare(traj: Trajectory, human: HumanPolicyConfig, machine_mask: PerceptionMask = PERFECT,
            view: str = "absolute", env: EnvConfig = DEFAULT_ENV,
            human_estimate: EmpiricalHumanPolicy | None = None) -> PreparedTrajectory:
    """Featurize a driving trajectory: true state for the critic, machine view for the actor."""
    grid, lanes = traj.grid, traj.lanes
    critic_states = featurize_path(grid, lanes, PERFECT, view)
    actor_states = featurize_path(grid, lanes[:-1], machine_mask, view)
    legal = np.array([legal_mask(int(l)) for l in lanes[:-1]])
    if human_estimate is None:
        probs = np.array([
            human_action_distribution(grid, Position(t, int(lanes[t])), human, False, env)[a]
            for t, a in enumerate(traj.actions)
        ])
    else:
        probs = np.empty(len(traj))
        for t, a in enumerate(traj.actions):
            p = human_estimate.prob(state_key(critic_states[t], lanes[t]), int(a))
            probs[t] = 0.0 if p is None else p
    return PreparedTrajectory(critic_states, actor_states, legal, np.asarray(traj.actions),
                              np.asarray(traj.costs, dtype=float), probs, True)


def state_key(features: np.ndarray, lane: int) -> bytes:
    """Hashable key of a driving state for the Monte-Carlo human estimate."""
    return np.packbits(features.astype(np.uint8)).tobytes() + bytes([int(lane)])


def human_state_actions(trajectories: Iterable[Trajectory], view: str = "absolute"):
    """(state key, action) pairs for ``estimate_human_policy``."""
    for traj in trajectories:
        states = featurize_path(traj.grid, traj.lanes[:-1], PERFECT, view)
        for t, a in enumerate(traj.actions):
            yield state_key(states[t], traj.lanes[t]), int(a)


@dataclass
class EmphaticAccumulators:
    """Follow-on traces ``F`` (critic) and ``M`` (actor).

    ``advance`` computes ``F_t = i_t + r_{t-1} F_{t-1}``, ``M_t = d_t + r_{t-1} M_{t-1}``
    and then stores ``r_t``.  Works elementwise on arrays as well as scalars.
    """

    F: float = 0.0
    M: float = 0.0
    prev_ratio: float = 1.0
    cap: float | None = None
    clips: int = 0

    def reset(self) -> None:
        self.F, self.M, self.prev_ratio = 0.0, 0.0, 1.0

    def advance(self, interest, d, ratio):
        F = interest + self.prev_ratio * self.F
        M = d + self.prev_ratio * self.M
        if self.cap is not None:
            self.clips += int(np.sum(F > self.cap) + np.sum(M > self.cap))
            F = np.minimum(F, self.cap)
            M = np.minimum(M, self.cap)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(M))):
            raise FloatingPointError(f"non-finite emphatic trace: F={F}, M={M}, ratio={self.prev_ratio}")
        self.F, self.M, self.prev_ratio = F, M, ratio
        return F, M


def actor_gradient_estimate(actor: Actor, s: np.ndarray, legal, action: int,
                            emphasis: float, rho: float, delta: float) -> np.ndarray:
    """``M_t rho_t delta_t grad ln pi_M(a_t|s_t)``."""
    if delta == 0.0 or emphasis == 0.0 or rho == 0.0:
        return np.zeros_like(actor.net.params)
    return emphasis * rho * delta * actor.log_prob_grad(s, legal, action)


@dataclass
class OfflineStats:
    transitions: int = 0
    machine_decisions: int = 0
    trace_clips: int = 0
    coverage_floors: int = 0
    critic_sq_td: float = 0.0

    @property
    def machine_fraction(self) -> float:
        return self.machine_decisions / max(self.transitions, 1)


def offline_train(
    dataset: Sequence[PreparedTrajectory],
    actor: Actor,
    critic: OptionValueCritic,
    rng: np.random.Generator,
    epsilon: Callable[[int], float] | float = 0.1,
    controller: str = "triage",
    interest: Callable[[np.ndarray], float] | float = 1.0,
    train_actor: bool = True,
    reset_traces: bool = True,
    trace_cap: float | None = 1e3,
    fixed_tau: Callable[[np.ndarray], float] | None = None,
    coverage_floor: float = COVERAGE_FLOOR,
    ratio: str = "sampled",
    actor_trace: str = "listing",
    episode_callback: Callable[[int], None] | None = None,
) -> OfflineStats:
    """Train ``actor`` and ``critic`` in place on ``dataset``, in order.

    ``controller`` is ``"triage"`` (epsilon-greedy on the critic) or
    ``"machine"`` (always the machine).  ``epsilon`` may be a function of the
    1-based episode index.  ``fixed_tau`` replaces the epsilon-greedy rule by a
    fixed per-state machine probability.  ``episode_callback(j)`` runs after
    episode ``j``.

    ``ratio="sampled"`` carries the traces forward with the ratio of the
    drawn controller; ``"expected"`` mixes both policies with the triage
    probability, which keeps the carried ratio independent of the trace it
    multiplies.  The current step is always weighted by the drawn controller's
    ratio, since that is what the option value ``Q(s_t, d_t)`` needs.
    ``actor_trace="listing"`` weights the actor step by ``M_t``;
    ``"follow_on"`` uses ``d_t F_t``, whose mean weighting is the gradient of
    the offline objective even when the triage probability varies by state.
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    if controller not in ("triage", "machine"):
        raise ValueError(f"unknown controller {controller!r}")
    if ratio not in ("sampled", "expected"):
        raise ValueError(f"unknown ratio mode {ratio!r}")
    if actor_trace not in ("listing", "follow_on"):
        raise ValueError(f"unknown actor trace {actor_trace!r}")
    eps_of = epsilon if callable(epsilon) else (lambda _j, e=float(epsilon): e)
    interest_of = interest if callable(interest) else (lambda _s, i=float(interest): i)
    cc = critic.control_costs
    traces = EmphaticAccumulators(cap=trace_cap)
    stats = OfflineStats()

    def tau_of(s, q):
        if controller == "machine":
            return 1.0
        if fixed_tau is not None:
            return float(fixed_tau(s))
        return machine_probability(q[0], q[1], eps)

    def draw(s, q, u):
        return MACHINE if u < tau_of(s, q) else HUMAN

    for j, traj in enumerate(dataset, start=1):
        eps = eps_of(j)
        if reset_traces:
            traces.reset()
        uniforms = rng.random((len(traj), 2))
        for t in range(len(traj)):
            s = traj.critic_states[t]
            a = int(traj.actions[t])
            c = float(traj.costs[t])
            q = critic.values(s)
            d = draw(s, q, uniforms[t, 0])

            p_h = float(traj.human_probs[t])
            if p_h <= 0.0:
                log.warning("coverage violated at episode %d step %d; flooring human probability", j, t)
                stats.coverage_floors += 1
                p_h = coverage_floor
            probs, cache = actor.distribution_cached(traj.actor_states[t], traj.legal[t])
            p_m = float(probs[a])
            varrho = p_m / p_h if d == MACHINE else 1.0
            if ratio == "expected":
                tau = tau_of(s, q)
                carry = (tau * p_m + (1.0 - tau) * p_h) / p_h
            else:
                carry = varrho
            F, M = traces.advance(interest_of(s), d, carry)

            last = t == len(traj) - 1
            if last and traj.terminal_last:
                q_next = 0.0
            else:
                s_next = traj.critic_states[t + 1]
                d_next = draw(s_next, critic.values(s_next), uniforms[t, 1])
                q_next = float(critic.target_values(s_next)[d_next])

            delta_q = critic.td_step(s, d, c + cc[d] + q_next, weight=F * varrho)
            stats.critic_sq_td += delta_q * delta_q

            if train_actor:
                delta = c + cc[d] + q_next - q[d]
                emphasis = M if actor_trace == "listing" else d * F
                actor.policy_step(traj.actor_states[t], traj.legal[t], a, emphasis * (p_m / p_h) * delta,
                                  cached=(probs, cache))
            stats.transitions += 1
            stats.machine_decisions += d
        if episode_callback is not None:
            episode_callback(j)
    stats.trace_clips = traces.clips
    return stats
