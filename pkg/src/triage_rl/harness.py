"""Scenarios, comparison methods, the evaluation protocol and run artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .approximator import FeedForwardNet, RmsProp, net_from_dict, net_to_dict
from .gridworld import DEFAULT_ENV, START_LANE, ContractViolation, EnvConfig, Grid, Position, generate_episode
from .gridworld import optimal_plan  # noqa: F401  (re-exported: the planner is part of the harness API)
from .offline import collect_human_dataset, offline_train, prepare
from .online import DrivingEnv, OnlineConfig, OnlineState, online_train, run_episode
from .perception import OPTION_DIM, PERFECT, STATE_DIM, PerceptionMask
from .policies import Actor, HumanPolicyConfig
from .triage import EpsilonSchedule, OptionValueCritic, epsilon_at

log = logging.getLogger(__name__)

METHODS = ("HUMAN", "MACHINE", "TRIAGE", "FIXSWITCH", "OPT")
TRAINED = ("MACHINE", "TRIAGE", "FIXSWITCH")
CSV_COLUMNS = ("episode", "avg_cost", "env_cost", "control_cost", "machine_fraction", "epsilon")

# spawn keys of the independent random streams derived from a scenario seed
_DATASET, _INIT, _OFFLINE, _ONLINE, _EVAL, _TEST_SET = range(6)


class DependencyError(ContractViolation):
    """A method needs an artifact of another method that is not available."""


def _mask(names) -> PerceptionMask:
    return PerceptionMask.from_names(names)


@dataclass
class ScenarioConfig:
    name: str
    human_blind: tuple = ()
    machine_blind: tuple = ()
    switch_blindness: tuple = ()
    control_costs: tuple = (0.0, 0.0)
    offline_episodes: int = 60_000
    online_episodes: int = 100_000
    eval_interval: int = 1000
    seed: int = 0
    test_episodes: int = 1000
    test_seed: int | None = None
    hidden: int = 256
    learning_rate: float = 1e-4
    sync_interval: int = 5000
    init: str = "scaled"
    view: str = "egocentric"
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    entropy_weight: float = 0.01
    use_advantage: bool = True
    reset_traces: bool = True
    trace_cap: float | None = 1e3
    ratio: str = "sampled"
    actor_trace: str = "listing"
    horizon: int = 20

    def __post_init__(self):
        if self.name not in ("I", "II", "III"):
            raise ContractViolation(f"unknown scenario {self.name!r}")
        for n in ("offline_episodes", "online_episodes", "eval_interval", "test_episodes", "hidden"):
            if getattr(self, n) < 1:
                raise ContractViolation(f"{n} must be positive")
        if isinstance(self.epsilon, dict):
            self.epsilon = EpsilonSchedule(**self.epsilon)
        self.control_costs = tuple(float(c) for c in self.control_costs)
        for n in ("human_blind", "machine_blind", "switch_blindness"):
            setattr(self, n, tuple(_mask(getattr(self, n)).to_list()))

    @property
    def human(self) -> HumanPolicyConfig:
        return HumanPolicyConfig(_mask(self.human_blind), _mask(self.switch_blindness))

    @property
    def machine_mask(self) -> PerceptionMask:
        return _mask(self.machine_blind)

    @property
    def env(self) -> EnvConfig:
        return EnvConfig(horizon=self.horizon) if self.horizon != DEFAULT_ENV.horizon else DEFAULT_ENV

    def stream(self, key: int, *extra: int) -> np.random.Generator:
        if key == _TEST_SET and self.test_seed is not None:
            return np.random.default_rng(np.random.SeedSequence(self.test_seed, spawn_key=(_TEST_SET,)))
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(key, *extra)))

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["human_blind"] = list(self.human_blind)
        doc["machine_blind"] = list(self.machine_blind)
        doc["switch_blindness"] = list(self.switch_blindness)
        doc["control_costs"] = list(self.control_costs)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ContractViolation(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**doc)

    def override(self, **changes) -> "ScenarioConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in changes.items() if v is not None})
        return ScenarioConfig.from_dict(doc)


def scenario(which) -> ScenarioConfig:
    """Scenario by number (1-3) or name (I-III) with its default sizes."""
    key = {"1": "I", "2": "II", "3": "III"}.get(str(which), str(which))
    if key == "I":
        return ScenarioConfig("I", human_blind=("car",), machine_blind=("grass",),
                              control_costs=(0.0, 0.0), online_episodes=100_000)
    if key == "II":
        return ScenarioConfig("II", human_blind=("car",), control_costs=(0.0, 1.0),
                              online_episodes=100_000)
    if key == "III":
        return ScenarioConfig("III", human_blind=("grass",), switch_blindness=("car",),
                              machine_blind=("stone",), control_costs=(1.0, 0.0),
                              online_episodes=200_000)
    raise ContractViolation(f"unknown scenario {which!r}")


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvaluationReport:
    method: str
    episode: int
    avg_cost: float
    env_cost: float
    control_cost: float
    machine_fraction: float
    epsilon: float
    per_episode: np.ndarray | None = None

    def row(self) -> dict:
        return {"episode": self.episode, "avg_cost": self.avg_cost, "env_cost": self.env_cost,
                "control_cost": self.control_cost, "machine_fraction": self.machine_fraction,
                "epsilon": self.epsilon}


def evaluation_set(cfg: ScenarioConfig) -> list[Grid]:
    """The shared evaluation episodes; independent of every training stream."""
    rng = cfg.stream(_TEST_SET)
    return [generate_episode(rng, cfg.horizon, cfg.env) for _ in range(cfg.test_episodes)]


def evaluate(cfg: ScenarioConfig, grids: list[Grid], controller: str, actor: Actor | None,
             critic: OptionValueCritic | None, eps: float, checkpoint: int,
             method: str = "", keep_episodes: bool = False) -> EvaluationReport:
    """Roll the system out once on every test grid (actions are sampled).

    The sampling stream depends only on the scenario seed and the checkpoint
    index, so identical inputs give identical reports.
    """
    rng = cfg.stream(_EVAL, checkpoint)
    env = DrivingEnv(None, cfg.human, cfg.machine_mask, cfg.view, cfg.env)
    cc = np.asarray(cfg.control_costs)
    env_costs = np.empty(len(grids))
    ctrl_costs = np.empty(len(grids))
    fractions = np.empty(len(grids))
    for i, grid in enumerate(grids):
        result = run_episode(env, actor, critic, eps, rng, controller, grid=grid)
        d = np.asarray(result["controllers"])
        if len(d) != grid.horizon:
            raise ContractViolation("episode length differs from the horizon")
        env_costs[i] = result["env_cost"]
        ctrl_costs[i] = float(np.sum(cc[d]))
        fractions[i] = d.mean()
    total = env_costs + ctrl_costs
    return EvaluationReport(method, checkpoint, float(total.mean()), float(env_costs.mean()),
                            float(ctrl_costs.mean()), float(fractions.mean()), float(eps),
                            np.stack([env_costs, ctrl_costs, fractions], axis=1) if keep_episodes else None)


def evaluate_opt(cfg: ScenarioConfig, grids: list[Grid], checkpoint: int = 0) -> EvaluationReport:
    """Planner on the true grid; no controller, so the machine fraction is NaN."""
    costs = np.array([optimal_plan(g, Position(0, START_LANE), config=cfg.env)[0] for g in grids])
    return EvaluationReport("OPT", checkpoint, float(costs.mean()), float(costs.mean()), 0.0,
                            math.nan, 0.0, np.stack([costs, np.zeros_like(costs), np.full_like(costs, np.nan)], 1))


# -- models and checkpoints ---------------------------------------------------------

def build_models(cfg: ScenarioConfig) -> tuple[Actor, OptionValueCritic]:
    rng = cfg.stream(_INIT)
    actor_net = FeedForwardNet.initialized(STATE_DIM, cfg.hidden, 3, rng, cfg.init)
    critic_net = FeedForwardNet.initialized(OPTION_DIM, cfg.hidden, 1, rng, cfg.init)
    actor = Actor(actor_net, RmsProp(actor_net.params.size, cfg.learning_rate))
    critic = OptionValueCritic(critic_net, cfg.control_costs, cfg.sync_interval,
                               RmsProp(critic_net.params.size, cfg.learning_rate))
    return actor, critic


def models_to_dict(actor: Actor, critic: OptionValueCritic, **counters) -> dict:
    return {"actor": {"net": net_to_dict(actor.net), "optimizer": actor.optimizer.state_dict()},
            "critic": critic.state_dict(), "counters": counters}


def models_from_dict(doc: dict) -> tuple[Actor, OptionValueCritic, dict]:
    from .approximator import optimizer_from_state

    actor = Actor(net_from_dict(doc["actor"]["net"]), optimizer_from_state(doc["actor"]["optimizer"]))
    return actor, OptionValueCritic.from_state(doc["critic"]), doc.get("counters", {})


def _finite(doc):
    if isinstance(doc, float) and not math.isfinite(doc):
        return None
    if isinstance(doc, dict):
        return {k: _finite(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_finite(v) for v in doc]
    return doc


def write_json(path: Path, doc) -> str:
    """Write deterministic JSON (non-finite numbers become null); returns its sha256."""
    text = json.dumps(_finite(doc), sort_keys=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def write_csv(path: Path, reports: list[EvaluationReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.episode, fmt(r.avg_cost), fmt(r.env_cost), fmt(r.control_cost),
                        fmt(r.machine_fraction), fmt(r.epsilon)])


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "episode" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- methods --------------------------------------------------------------------------

@dataclass
class MethodResult:
    method: str
    reports: list[EvaluationReport]
    actor: Actor | None = None
    critic: OptionValueCritic | None = None
    offline_actor: dict | None = None
    seconds: float = 0.0

    @property
    def final(self) -> EvaluationReport:
        return self.reports[-1]


def checkpoints(n: int, interval: int) -> list[int]:
    pts = list(range(interval, n + 1, interval))
    if not pts or pts[-1] != n:
        pts.append(n)
    return pts


def _controller(method: str) -> str:
    return "machine" if method == "MACHINE" else "triage"


def run_offline(cfg: ScenarioConfig, method: str, actor: Actor, critic: OptionValueCritic,
                dataset, grids, reports: list, progress: Callable | None = None) -> None:
    """Offline stage with evaluations (epsilon 0) every ``eval_interval`` episodes."""
    n = len(dataset)
    rng = cfg.stream(_OFFLINE, METHODS.index(method))
    controller = _controller(method)
    marks = set(checkpoints(n, cfg.eval_interval))

    def on_episode(j):
        if j in marks:
            reports.append(evaluate(cfg, grids, controller, actor, critic, 0.0, j, method))
            if progress:
                progress(method, "offline", reports[-1])

    offline_train(dataset, actor, critic, rng,
                  epsilon=lambda j: epsilon_at(cfg.epsilon, "offline", j, n),
                  controller=controller, train_actor=method != "FIXSWITCH",
                  reset_traces=cfg.reset_traces, trace_cap=cfg.trace_cap,
                  ratio=cfg.ratio, actor_trace=cfg.actor_trace, episode_callback=on_episode)


def run_online(cfg: ScenarioConfig, method: str, actor: Actor, critic: OptionValueCritic,
               grids, reports: list, state: OnlineState | None = None,
               progress: Callable | None = None, rng: np.random.Generator | None = None,
               checkpoint_path: Path | None = None) -> OnlineState:
    """Online stage; evaluations use the exploration rate of the current episode.

    With ``checkpoint_path`` a resumable snapshot is rewritten at every
    evaluation.  ``state`` and ``rng`` continue an interrupted run.
    """
    rng = cfg.stream(_ONLINE, METHODS.index(method)) if rng is None else rng
    state = state or OnlineState()
    env = DrivingEnv(rng, cfg.human, cfg.machine_mask, cfg.view, cfg.env)
    controller = _controller(method)
    base = cfg.offline_episodes
    marks = set(checkpoints(cfg.online_episodes, cfg.eval_interval))
    remaining = cfg.online_episodes - state.episodes
    if remaining < 0:
        raise ContractViolation(f"state is past the configured {cfg.online_episodes} online episodes")
    config = OnlineConfig(remaining, cfg.entropy_weight, cfg.use_advantage, cfg.epsilon)

    def on_episode(j, eps):
        if j in marks:
            reports.append(evaluate(cfg, grids, controller, actor, critic, eps, base + j, method))
            if progress:
                progress(method, "online", reports[-1])
            if checkpoint_path is not None:
                write_json(checkpoint_path, online_snapshot(method, actor, critic, state, rng, reports))

    online_train(env, actor, critic, config, rng, controller,
                 train_actor=method != "FIXSWITCH", state=state, episode_callback=on_episode)
    return state


def online_snapshot(method: str, actor: Actor, critic: OptionValueCritic, state: OnlineState,
                    rng: np.random.Generator, reports: list) -> dict:
    """Everything needed to continue an online run bit-for-bit."""
    doc = models_to_dict(actor, critic, **dataclasses.asdict(state))
    doc.update(method=method, rng=rng.bit_generator.state, reports=[r.row() for r in reports])
    return doc


def restore_online(doc: dict) -> tuple[Actor, OptionValueCritic, OnlineState, np.random.Generator, list]:
    actor, critic, counters = models_from_dict(doc)
    state = OnlineState(**counters)
    bit_gen = getattr(np.random, doc["rng"]["bit_generator"])()
    bit_gen.state = doc["rng"]
    reports = [report_from_row(doc["method"], row) for row in doc["reports"]]
    return actor, critic, state, np.random.Generator(bit_gen), reports


def report_from_row(method: str, row: dict) -> EvaluationReport:
    vals = {k: (math.nan if row[k] is None else row[k]) for k in CSV_COLUMNS}
    return EvaluationReport(method, int(vals.pop("episode")), **{k: float(v) for k, v in vals.items()})


def human_dataset(cfg: ScenarioConfig):
    """The recorded human-alone episodes every offline method learns from."""
    trajs = collect_human_dataset(cfg.offline_episodes, HumanPolicyConfig(_mask(cfg.human_blind)),
                                  cfg.stream(_DATASET), cfg.env)
    return trajs


def run_method(method: str, cfg: ScenarioConfig, grids: list[Grid] | None = None, dataset=None,
               upstream: dict | None = None, progress: Callable | None = None) -> MethodResult:
    """Train (if needed) and evaluate one method; returns its report series.

    ``upstream`` maps method names to earlier results; FIXSWITCH needs the
    MACHINE actor frozen at the end of its offline stage.
    """
    if method not in METHODS:
        raise ContractViolation(f"unknown method {method!r}; expected one of {METHODS}")
    t0 = time.perf_counter()
    grids = evaluation_set(cfg) if grids is None else grids
    marks = [0] + checkpoints(cfg.offline_episodes, cfg.eval_interval) + [
        cfg.offline_episodes + j for j in checkpoints(cfg.online_episodes, cfg.eval_interval)]
    if method in ("HUMAN", "OPT"):
        # nothing learns: one evaluation, repeated on every checkpoint
        rep = evaluate_opt(cfg, grids) if method == "OPT" else evaluate(cfg, grids, "human", None, None, 0.0, 0, method)
        reports = [dataclasses.replace(rep, episode=j, per_episode=None) for j in marks]
        return MethodResult(method, reports, seconds=time.perf_counter() - t0)

    actor, critic = build_models(cfg)
    if method == "FIXSWITCH":
        source = (upstream or {}).get("MACHINE")
        frozen = source.offline_actor if isinstance(source, MethodResult) else source
        if frozen is None:
            raise DependencyError("FIXSWITCH needs the MACHINE actor from the end of its offline stage")
        actor = Actor(net_from_dict(frozen["net"]), actor.optimizer)
    if dataset is None:
        dataset = [prepare(t, cfg.human, cfg.machine_mask, cfg.view, cfg.env) for t in human_dataset(cfg)]
    controller = _controller(method)
    reports = [evaluate(cfg, grids, controller, actor, critic, 0.0, 0, method)]
    run_offline(cfg, method, actor, critic, dataset, grids, reports, progress)
    offline_actor = {"net": net_to_dict(actor.net)}
    run_online(cfg, method, actor, critic, grids, reports, progress=progress)
    return MethodResult(method, reports, actor, critic, offline_actor, time.perf_counter() - t0)


def prepared_dataset(cfg: ScenarioConfig):
    return [prepare(t, cfg.human, cfg.machine_mask, cfg.view, cfg.env) for t in human_dataset(cfg)]


def run_scenario(cfg: ScenarioConfig, methods=None, out: Path | str | None = None,
                 progress: Callable | None = None) -> dict[str, MethodResult]:
    """Run every method of a scenario; FIXSWITCH is only part of Scenario III by default."""
    if methods is None:
        methods = ["HUMAN", "OPT", "MACHINE", "TRIAGE"] + (["FIXSWITCH"] if cfg.name == "III" else [])
    methods = list(methods)
    if "FIXSWITCH" in methods and "MACHINE" not in methods:
        raise DependencyError("FIXSWITCH runs after MACHINE")
    methods.sort(key=lambda m: m == "FIXSWITCH")
    grids = evaluation_set(cfg)
    dataset = prepared_dataset(cfg) if set(methods) & set(TRAINED) else None
    results: dict[str, MethodResult] = {}
    for m in methods:
        log.info("scenario %s: running %s", cfg.name, m)
        results[m] = run_method(m, cfg, grids, dataset, results, progress)
    if out is not None:
        write_run(Path(out), cfg, results)
    return results


def write_run(out: Path, cfg: ScenarioConfig, results: dict[str, MethodResult]) -> dict:
    """One CSV per method, checkpoints, and a manifest hashing them."""
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for m, res in results.items():
        write_csv(out / f"{m.lower()}.csv", res.reports)
        if res.actor is not None:
            hashes[f"{m.lower()}_final.json"] = write_json(
                out / "checkpoints" / f"{m.lower()}_final.json", models_to_dict(res.actor, res.critic))
        if res.offline_actor is not None:
            hashes[f"{m.lower()}_offline_actor.json"] = write_json(
                out / "checkpoints" / f"{m.lower()}_offline_actor.json", res.offline_actor)
    digest = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(hashes.items())).encode()).hexdigest()
    manifest = {
        "scenario": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "test_seed": cfg.test_seed,
                  "streams": ["dataset", "init", "offline", "online", "eval", "test_set"]},
        "methods": sorted(results),
        "final": {m: r.final.row() for m, r in sorted(results.items())},
        "checkpoints": hashes,
        "content_hash": digest,
        "backend": _kernels.BACKEND,
    }
    write_json(out / "manifest.json", manifest)
    return manifest
