"""Compare the numba kernels with their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 2000] [--episodes 200]

Part one times every kernel in-process on inputs shaped like the driving
task (76-bit states, 256 hidden units).  Part two runs a short offline and
online training session in two subprocesses, one per backend, so the
environment flag takes its normal path.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from triage_rl import _kernels
from triage_rl.gridworld import DEFAULT_ENV, generate_episode

HIDDEN = 256


def kernel_inputs(rng):
    n_in, n_out = _kernels.STATE_DIM, 3
    size = HIDDEN * n_in + HIDDEN + n_out * HIDDEN + n_out
    params = rng.normal(size=size) * 0.05
    x = rng.integers(0, 2, n_in).astype(float)
    hidden = np.tanh(rng.normal(size=HIDDEN))
    q_size = HIDDEN * (n_in + 2) + HIDDEN + HIDDEN + 1
    q_params = rng.normal(size=q_size) * 0.05
    grid = generate_episode(rng)
    blind = np.array([False, False, False, True])
    return {
        "mlp_forward": (params, x, n_in, HIDDEN, n_out),
        "option_pair_forward": (q_params, x, HIDDEN),
        "mlp_backward": (params, x, hidden, rng.normal(size=n_out), n_in, HIDDEN, n_out),
        "rmsprop_update": (params.copy(), np.zeros(size), rng.normal(size=size) * 1e-3, 1e-4, 0.99, 1e-8),
        "masked_softmax": (rng.normal(size=3), np.array([True, True, False])),
        "featurize": (grid.cells, 3, 1, blind, False, np.zeros(_kernels.STATE_DIM)),
        "human_probs": (grid.cells, 3, 1, blind, DEFAULT_ENV.cell_costs),
        "plan": (grid.cells, DEFAULT_ENV.cell_costs, 0, 1),
    }


def bench_kernels(repeat: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    inputs = kernel_inputs(rng)
    jit = _kernels.compiled()
    rows = []
    for name, args in inputs.items():
        pure, fast = _kernels.PURE[name], jit[name]
        fast(*args)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: pure(*args), number=repeat, repeat=3)) / repeat
        t_nb = min(timeit.repeat(lambda: fast(*args), number=repeat, repeat=3)) / repeat
        rows.append((name, t_np, t_nb))
    return rows


SESSION = """
import json, time
from triage_rl import _kernels
from triage_rl.harness import scenario, build_models, prepared_dataset, run_offline, run_online, evaluation_set
cfg = scenario(1).override(offline_episodes={n}, online_episodes={n}, eval_interval={n}, test_episodes=50)
dataset = prepared_dataset(cfg)
actor, critic = build_models(cfg)
grids = evaluation_set(cfg)
t0 = time.perf_counter(); run_offline(cfg, "TRIAGE", actor, critic, dataset, grids, [])
t1 = time.perf_counter(); run_online(cfg, "TRIAGE", actor, critic, grids, [])
t2 = time.perf_counter()
print(json.dumps({{"backend": _kernels.BACKEND, "offline": t1 - t0, "online": t2 - t1}}))
"""


def bench_session(episodes: int, disable_numba: bool) -> dict:
    env = dict(os.environ, **{_kernels.ENV_FLAG: "1" if disable_numba else "0"})
    # one warm-up run fills numba's on-disk cache so compilation is not timed
    for _ in range(1 if disable_numba else 2):
        out = subprocess.run([sys.executable, "-c", SESSION.format(n=episodes)], env=env,
                             capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--episodes", type=int, default=200)
    args = parser.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':22s} {'numpy (us)':>12s} {'numba (us)':>12s} {'speedup':>8s}")
    for name, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{name:22s} {t_np * 1e6:12.2f} {t_nb * 1e6:12.2f} {t_np / t_nb:8.1f}x")

    steps = args.episodes * DEFAULT_ENV.horizon
    print(f"\ntraining session: {args.episodes} offline + {args.episodes} online episodes, scenario I")
    res = {b: bench_session(args.episodes, b == "numpy") for b in ("numpy", "numba")}
    for stage in ("offline", "online"):
        t_np, t_nb = res["numpy"][stage], res["numba"][stage]
        print(f"{stage:8s} numpy {t_np / steps * 1e6:8.1f} us/step   numba {t_nb / steps * 1e6:8.1f} us/step"
              f"   speedup {t_np / t_nb:5.1f}x")


if __name__ == "__main__":
    main()
