"""Command line entry point: ``triage-rl <subcommand> [flags]``.

Every subcommand reads and writes under ``--out``.  The stages can run one at
a time (``collect``, ``train-offline``, ``train-online``, ``evaluate``,
``render``) or all together (``experiment``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks
from .gridworld import START_LANE, ContractViolation, Position, optimal_plan
from .approximator import net_from_dict
from .harness import (_DATASET, _EVAL, METHODS, TRAINED, DependencyError, ScenarioConfig, _controller,
                      build_models, evaluate, evaluate_opt, models_from_dict, models_to_dict, prepare,
                      report_from_row, restore_online, run_offline, run_online, run_scenario, scenario,
                      evaluation_set, write_csv, write_json)
from .offline import collect_human_dataset, read_dataset, write_dataset
from .online import DrivingEnv, run_episode
from .policies import Actor
from .render import TAGS, render_trajectory

log = logging.getLogger("triage_rl")


def _config(args) -> ScenarioConfig:
    cfg = scenario(args.scenario)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        cfg = cfg.override(**doc)
    return cfg.override(seed=args.seed, offline_episodes=args.episodes_offline,
                        online_episodes=args.episodes_online, eval_interval=args.eval_interval)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ckpt(out: Path, method: str, stage: str) -> Path:
    return out / "checkpoints" / f"{method.lower()}_{stage}.json"


def _progress(method, stage, r):
    log.info("%s %s episode %d: cost %.3f (machine %.3f)", method, stage, r.episode, r.avg_cost,
             r.machine_fraction)


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise DependencyError(f"{what} not found at {path}")
    return json.loads(path.read_text())


def _dataset(cfg: ScenarioConfig, out: Path):
    path = out / "dataset.jsonl"
    if path.exists():
        trajs = read_dataset(path, cfg.env)
        if len(trajs) != cfg.offline_episodes:
            raise ContractViolation(f"{path} holds {len(trajs)} episodes, config wants {cfg.offline_episodes}")
    else:
        trajs = collect_human_dataset(cfg.offline_episodes, cfg.human, cfg.stream(_DATASET), cfg.env)
    return trajs


def _trained_method(args) -> str:
    if args.method not in TRAINED:
        raise ContractViolation(f"--method must be one of {TRAINED} for this stage")
    return args.method


# -- subcommands ----------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg, out = _config(args), _out(args)
    trajs = collect_human_dataset(cfg.offline_episodes, cfg.human, cfg.stream(_DATASET), cfg.env)
    write_dataset(out / "dataset.jsonl", trajs)
    write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {len(trajs)} human episodes to {out / 'dataset.jsonl'}")
    return 0


def cmd_train_offline(args) -> int:
    cfg, out = _config(args), _out(args)
    method = _trained_method(args)
    actor, critic = build_models(cfg)
    if method == "FIXSWITCH":
        frozen = _load_json(_ckpt(out, "MACHINE", "offline_actor"), "MACHINE offline actor")
        actor = Actor(net_from_dict(frozen["net"]), actor.optimizer)
    dataset = [prepare(t, cfg.human, cfg.machine_mask, cfg.view, cfg.env) for t in _dataset(cfg, out)]
    grids = evaluation_set(cfg)
    reports = [evaluate(cfg, grids, _controller(method), actor, critic, 0.0, 0, method)]
    run_offline(cfg, method, actor, critic, dataset, grids, reports, _progress)
    doc = models_to_dict(actor, critic)
    doc.update(method=method, reports=[r.row() for r in reports])
    write_json(_ckpt(out, method, "offline"), doc)
    write_json(_ckpt(out, method, "offline_actor"), {"net": doc["actor"]["net"]})
    write_csv(out / f"{method.lower()}.csv", reports)
    print(f"{method} offline: final cost {reports[-1].avg_cost:.3f}")
    return 0


def cmd_train_online(args) -> int:
    cfg, out = _config(args), _out(args)
    method = _trained_method(args)
    snap = _ckpt(out, method, "online")
    if snap.exists() and not args.fresh:
        actor, critic, state, rng, reports = restore_online(json.loads(snap.read_text()))
        log.info("resuming %s at online episode %d", method, state.episodes)
    else:
        doc = _load_json(_ckpt(out, method, "offline"), f"{method} offline checkpoint")
        actor, critic, _ = models_from_dict(doc)
        reports = [report_from_row(method, row) for row in doc["reports"]]
        state = rng = None
    state = run_online(cfg, method, actor, critic, evaluation_set(cfg), reports, state, _progress, rng, snap)
    write_json(_ckpt(out, method, "final"), models_to_dict(actor, critic, online_episodes=state.episodes))
    write_csv(out / f"{method.lower()}.csv", reports)
    print(f"{method} online: final cost {reports[-1].avg_cost:.3f}, machine fraction "
          f"{reports[-1].machine_fraction:.3f}")
    return 0


def _load_models(args, out: Path, method: str):
    path = Path(args.checkpoint) if args.checkpoint else _ckpt(out, method, "final")
    actor, critic, _ = models_from_dict(_load_json(path, f"{method} checkpoint"))
    return actor, critic


def cmd_evaluate(args) -> int:
    cfg, out = _config(args), _out(args)
    grids = evaluation_set(cfg)
    method = args.method
    if method == "OPT":
        rep = evaluate_opt(cfg, grids)
    elif method == "HUMAN":
        rep = evaluate(cfg, grids, "human", None, None, 0.0, 0, method)
    else:
        actor, critic = _load_models(args, out, method)
        rep = evaluate(cfg, grids, _controller(method), actor, critic, args.epsilon, 0, method)
    write_json(out / f"eval_{method.lower()}.json", {"method": method, **rep.row()})
    print(",".join(f"{k}={v:.6g}" for k, v in rep.row().items()))
    return 0


def cmd_render(args) -> int:
    cfg, out = _config(args), _out(args)
    grids = evaluation_set(cfg)
    if not 0 <= args.episode < len(grids):
        raise ContractViolation(f"--episode must lie in [0, {len(grids)})")
    grid = grids[args.episode]
    _, plan = optimal_plan(grid, Position(0, START_LANE), config=cfg.env)
    overlay = [START_LANE]
    for a in plan:
        overlay.append(overlay[-1] + int(a) - 1)
    method = args.method
    if method == "OPT":
        lanes, tags = overlay, ["n/a"] * grid.horizon
    else:
        actor = critic = None
        if method in TRAINED:
            actor, critic = _load_models(args, out, method)
        env = DrivingEnv(None, cfg.human, cfg.machine_mask, cfg.view, cfg.env)
        controller = "human" if method == "HUMAN" else _controller(method)
        result = run_episode(env, actor, critic, args.epsilon, cfg.stream(_EVAL, 10**6, args.episode), controller,
                             grid=grid)
        lanes, tags = result["lanes"], [TAGS[d] for d in result["controllers"]]
    text, svg = render_trajectory(grid, lanes, tags, overlay)
    target = out / "render"
    target.mkdir(parents=True, exist_ok=True)
    stem = f"{method.lower()}_episode{args.episode}"
    (target / f"{stem}.txt").write_text(text)
    (target / f"{stem}.svg").write_text(svg)
    print(text, end="")
    return 0


def cmd_oracle_tests(args) -> int:
    results = checks.run_all()
    return 0 if all(r.passed for r in results) else 1


def cmd_experiment(args) -> int:
    cfg, out = _config(args), _out(args)
    methods = args.method.split(",") if args.method else None
    results = run_scenario(cfg, methods, out, _progress)
    for m, r in results.items():
        f = r.final
        print(f"{m:9s} cost {f.avg_cost:8.3f}  env {f.env_cost:8.3f}  machine {f.machine_fraction:.3f}")
    return 0


COMMANDS = {
    "collect": (cmd_collect, "record the human-alone dataset"),
    "train-offline": (cmd_train_offline, "offline stage on the human dataset"),
    "train-online": (cmd_train_online, "online stage from the offline checkpoint (resumes if interrupted)"),
    "evaluate": (cmd_evaluate, "evaluate one method on the shared test set"),
    "render": (cmd_render, "text and SVG picture of one test episode"),
    "oracle-tests": (cmd_oracle_tests, "check the implementation against exact tabular oracles"),
    "experiment": (cmd_experiment, "every method of a scenario, end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triage-rl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "oracle-tests":
            continue
        p.add_argument("--scenario", choices=("1", "2", "3"), default="1")
        p.add_argument("--method", choices=None if name == "experiment" else METHODS,
                       default=None if name == "experiment" else "TRIAGE",
                       help="comma-separated list for experiment" if name == "experiment" else None)
        p.add_argument("--seed", type=int)
        p.add_argument("--episodes-offline", type=int)
        p.add_argument("--episodes-online", type=int)
        p.add_argument("--eval-interval", type=int)
        p.add_argument("--out", default="runs")
        p.add_argument("--config", help="JSON file overriding scenario fields")
        if name in ("evaluate", "render"):
            p.add_argument("--checkpoint", help="model file (default: <out>/checkpoints/<method>_final.json)")
            p.add_argument("--epsilon", type=float, default=0.0)
        if name == "render":
            p.add_argument("--episode", type=int, default=0, help="index into the test set")
        if name == "train-online":
            p.add_argument("--fresh", action="store_true", help="ignore an existing online snapshot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
