"""On-policy fine-tuning with the triage policy switching control live."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gridworld import (DEFAULT_ENV, START_LANE, ContractViolation, EnvConfig, Grid, Position,
                        generate_episode, legal_mask)
from .perception import PERFECT, PerceptionMask, featurize
from .policies import Actor, HumanPolicyConfig, human_action_distribution, sample_action
from .triage import HUMAN, MACHINE, EpsilonSchedule, OptionValueCritic, decide, epsilon_at, machine_probability


class DrivingEnv:
    """Episode runner over driving grids.

    The critic reads the true cells, the actor reads the machine's masked view
    and the human acts on its own perception (plus switch blindness on the
    first step after taking over from the machine).
    """

    def __init__(self, rng: np.random.Generator | None, human: HumanPolicyConfig,
                 machine_mask: PerceptionMask = PERFECT, view: str = "absolute",
                 env: EnvConfig = DEFAULT_ENV):
        self.rng = rng
        self.human = human
        self.machine_mask = machine_mask
        self.view = view
        self.config = env
        self.horizon = env.horizon
        self.grid: Grid | None = None
        self.pos = Position(0, START_LANE)
        self.steps = 0

    def reset(self, grid: Grid | None = None) -> None:
        if grid is None:
            grid = generate_episode(self.rng, self.horizon, self.config)
        if grid.horizon != self.horizon:
            raise ContractViolation(f"episode horizon {grid.horizon} != {self.horizon}")
        self.grid = grid
        self.pos = Position(0, START_LANE)
        self.steps = 0

    @property
    def done(self) -> bool:
        return self.pos.row >= self.grid.horizon

    def critic_state(self) -> np.ndarray:
        return featurize(self.grid, self.pos, PERFECT, self.view)

    def actor_state(self) -> np.ndarray:
        return featurize(self.grid, self.pos, self.machine_mask, self.view)

    def legal(self) -> np.ndarray:
        return legal_mask(self.pos.lane)

    def human_distribution(self, just_switched: bool) -> np.ndarray:
        return human_action_distribution(self.grid, self.pos, self.human, just_switched, self.config)

    def step(self, action: int) -> float:
        if self.done:
            raise ContractViolation("episode already terminated")
        lane = self.pos.lane + int(action) - 1
        if not legal_mask(self.pos.lane)[int(action)]:
            raise ContractViolation(f"illegal action {action} in lane {self.pos.lane}")
        self.pos = Position(self.pos.row + 1, lane)
        self.steps += 1
        return float(self.config.cell_costs[self.grid.cells[self.pos.row, lane]])


@dataclass
class OnlineConfig:
    n_episodes: int = 100_000
    entropy_weight: float = 0.01
    use_advantage: bool = True
    schedule: EpsilonSchedule = EpsilonSchedule()

    def entropy_at(self, step: int) -> float:
        """Entropy weight at 1-based global online step ``step``."""
        return self.entropy_weight / step


@dataclass
class OnlineState:
    """Counters that make a run resumable."""

    episodes: int = 0
    steps: int = 0
    machine_steps: int = 0
    actor_updates: int = 0


def run_episode(env, actor: Actor | None, critic: OptionValueCritic | None, eps: float,
                rng: np.random.Generator, controller: str = "triage", grid: Grid | None = None,
                learn: Callable | None = None) -> dict:
    """Play one episode; ``learn`` (if given) is called after every step.

    ``controller``: ``"human"``, ``"machine"`` or ``"triage"``.  Returns the
    cost decomposition, the visited lanes and the controller of each step.
    """
    env.reset(grid)
    env_cost = control_cost = 0.0
    lanes, controllers = [env.pos.lane], []
    prev_d = HUMAN
    cc = critic.control_costs if critic is not None else np.zeros(2)
    s = env.critic_state() if controller == "triage" or learn is not None else None
    while not env.done:
        u = rng.random(3)
        q = critic.values(s) if critic is not None and s is not None else None
        if controller == "human":
            d = HUMAN
        elif controller == "machine":
            d = MACHINE
        else:
            d = decide(q[0], q[1], eps, u[0])
        legal = env.legal()
        cached = None
        s_actor = None
        if d == MACHINE:
            s_actor = env.actor_state()
            probs, cache = actor.distribution_cached(s_actor, legal)
            cached = (probs, cache)
        else:
            probs = env.human_distribution(just_switched=prev_d == MACHINE)
        a = sample_action(probs, u[1])
        cost = env.step(a)
        env_cost += cost
        control_cost += cc[d]
        lanes.append(env.pos.lane)
        controllers.append(d)
        s_next = None if env.done else (env.critic_state() if s is not None else None)
        if learn is not None:
            learn(s=s, q=q, d=d, a=a, cost=cost, s_next=s_next, u=u[2], legal=legal,
                  s_actor=s_actor, cached=cached)
        s = s_next
        prev_d = d
    return {"env_cost": env_cost, "control_cost": control_cost,
            "lanes": lanes, "controllers": controllers}


def online_train(env, actor: Actor, critic: OptionValueCritic, config: OnlineConfig,
                 rng: np.random.Generator, controller: str = "triage", train_actor: bool = True,
                 state: OnlineState | None = None,
                 episode_callback: Callable[[int, float], None] | None = None) -> OnlineState:
    """Run ``config.n_episodes`` more training episodes, updating in place.

    The critic takes a TD(0) step every transition.  The actor only learns on
    machine-controlled steps.  ``episode_callback(j, eps)`` runs after each
    episode with its 1-based index and exploration rate.
    """
    if controller not in ("triage", "machine"):
        raise ValueError(f"unknown controller {controller!r}")
    state = state or OnlineState()
    cc = critic.control_costs

    def value(qpair, eps):
        tau = 1.0 if controller == "machine" else machine_probability(qpair[0], qpair[1], eps)
        return tau * qpair[1] + (1.0 - tau) * qpair[0]

    for _ in range(config.n_episodes):
        j = state.episodes + 1
        eps = epsilon_at(config.schedule, "online", j)

        def learn(s, q, d, a, cost, s_next, u, legal, s_actor, cached):
            state.steps += 1
            if s_next is None:
                q_next = v_next = 0.0
            else:
                if controller == "machine":
                    d_next = MACHINE
                else:
                    q_live = critic.values(s_next)
                    d_next = decide(q_live[0], q_live[1], eps, u)
                q_tgt = critic.target_values(s_next)
                q_next = float(q_tgt[d_next])
                v_next = value(q_tgt, eps)
            critic.td_step(s, d, cost + cc[d] + q_next)
            if d == MACHINE:
                state.machine_steps += 1
                if train_actor:
                    if config.use_advantage:
                        weight = cost + cc[MACHINE] + v_next - value(q, eps)
                    else:
                        weight = float(q[MACHINE])
                    if not math.isfinite(weight):
                        raise FloatingPointError(f"non-finite actor loss at online step {state.steps}")
                    actor.policy_step(s_actor, legal, a, weight, config.entropy_at(state.steps), cached)
                    state.actor_updates += 1

        result = run_episode(env, actor, critic, eps, rng, controller, learn=learn)
        if env.horizon is not None and len(result["controllers"]) != env.horizon:
            raise ContractViolation("episode length differs from the horizon")
        state.episodes = j
        if episode_callback is not None:
            episode_callback(j, eps)
    return state
