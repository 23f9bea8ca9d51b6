"""Hot numeric kernels.

Every kernel exists as a plain numpy function (``np_<name>``).  When numba is
importable and ``TRIAGE_RL_DISABLE_NUMBA`` is unset (or ``0``), the public name
is bound to a compiled version instead.  Kernels whose numpy form allocates
temporaries (RMSProp, backprop) get a hand-written loop body for numba; the
rest compile the numpy body directly.

Flat parameter layout of a one-hidden-layer net, row-major::

    [ W1 (hidden x in) | b1 (hidden) | W2 (out x hidden) | b2 (out) ]
"""

from __future__ import annotations

import math
import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None

ENV_FLAG = "TRIAGE_RL_DISABLE_NUMBA"
NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get(ENV_FLAG, "0") in ("", "0", "false", "False")

N_CELL_TYPES = 4
LOOKAHEAD = 6
N_LANES = 3
STATE_DIM = N_CELL_TYPES * (1 + LOOKAHEAD * N_LANES)


# ---------------------------------------------------------------------------
# one-hidden-layer tanh network
# ---------------------------------------------------------------------------

def np_mlp_forward(params, x, n_in, n_hidden, n_out):
    off = n_hidden * n_in
    w1 = params[:off].reshape((n_hidden, n_in))
    b1 = params[off:off + n_hidden]
    off += n_hidden
    w2 = params[off:off + n_out * n_hidden].reshape((n_out, n_hidden))
    off += n_out * n_hidden
    b2 = params[off:off + n_out]
    hidden = np.tanh(w1 @ x + b1)
    return hidden, w2 @ hidden + b2


def np_option_pair_forward(params, s, n_hidden):
    """Q-net outputs for (s, human) and (s, machine) sharing one matvec.

    ``s`` is the state part only; the net input is ``s`` plus two controller
    bits, (1, 0) for the human and (0, 1) for the machine.
    """
    n_in = s.shape[0] + 2
    off = n_hidden * n_in
    w1 = params[:off].reshape((n_hidden, n_in))
    b1 = params[off:off + n_hidden]
    off += n_hidden
    w2 = params[off:off + n_hidden]
    b2 = params[off + n_hidden]
    x = np.zeros(n_in)
    x[:n_in - 2] = s
    pre = w1 @ x + b1
    h0 = np.tanh(pre + w1[:, n_in - 2])
    h1 = np.tanh(pre + w1[:, n_in - 1])
    return h0, h1, np.dot(w2, h0) + b2, np.dot(w2, h1) + b2


def np_mlp_backward(params, x, hidden, gout, n_in, n_hidden, n_out):
    off = n_hidden * n_in + n_hidden
    w2 = params[off:off + n_out * n_hidden].reshape((n_out, n_hidden))
    gpre = (gout @ w2) * (1.0 - hidden * hidden)
    grad = np.empty_like(params)
    grad[:n_hidden * n_in] = np.outer(gpre, x).ravel()
    grad[n_hidden * n_in:off] = gpre
    grad[off:off + n_out * n_hidden] = np.outer(gout, hidden).ravel()
    grad[off + n_out * n_hidden:] = gout
    return grad


def _nb_mlp_backward(params, x, hidden, gout, n_in, n_hidden, n_out):
    grad = np.empty_like(params)
    off = n_hidden * n_in + n_hidden
    off2 = off + n_out * n_hidden
    for j in range(n_hidden):
        acc = 0.0
        for k in range(n_out):
            acc += gout[k] * params[off + k * n_hidden + j]
        g = acc * (1.0 - hidden[j] * hidden[j])
        base = j * n_in
        for i in range(n_in):
            grad[base + i] = g * x[i]
        grad[n_hidden * n_in + j] = g
    for k in range(n_out):
        base = off + k * n_hidden
        for j in range(n_hidden):
            grad[base + j] = gout[k] * hidden[j]
        grad[off2 + k] = gout[k]
    return grad


def np_rmsprop_update(params, acc, grad, lr, rho, eps):
    acc *= rho
    acc += (1.0 - rho) * grad * grad
    params -= lr * grad / (np.sqrt(acc) + eps)


def _nb_rmsprop_update(params, acc, grad, lr, rho, eps):
    for i in range(params.shape[0]):
        g = grad[i]
        if g == 0.0:
            # sparse binary inputs leave most first-layer gradients at zero
            acc[i] *= rho
            continue
        a = rho * acc[i] + (1.0 - rho) * g * g
        acc[i] = a
        params[i] -= lr * g / (math.sqrt(a) + eps)


def np_masked_softmax(logits, legal):
    z = np.where(legal, logits, -np.inf)
    z = z - np.max(z)
    e = np.where(legal, np.exp(z), 0.0)
    return e / np.sum(e)


# ---------------------------------------------------------------------------
# driving world
# ---------------------------------------------------------------------------

def np_featurize(cells, row, lane, blind, egocentric, out):
    """Write the 76-bit perception of (row, lane) into ``out`` (zeroed here).

    Block 0 is the current cell, then rows row+1..row+6 with three blocks each.
    ``egocentric`` selects lanes lane-1, lane, lane+1 (off-grid -> zero block)
    instead of absolute lanes 0, 1, 2.  Blind cell types read as road (0).
    """
    out[:] = 0.0
    n_rows = cells.shape[0]
    c = cells[row, lane]
    if blind[c]:
        c = 0
    out[c] = 1.0
    for k in range(1, LOOKAHEAD + 1):
        r = row + k
        if r >= n_rows:
            break
        for j in range(N_LANES):
            if egocentric:
                col = lane + j - 1
                if col < 0 or col >= N_LANES:
                    continue
            else:
                col = j
            c = cells[r, col]
            if blind[c]:
                c = 0
            out[N_CELL_TYPES * (1 + (k - 1) * N_LANES + j) + c] = 1.0


def np_human_probs(cells, row, lane, blind, costs):
    """Myopic human: uniform over legal moves with minimal perceived next cost."""
    probs = np.zeros(N_LANES)
    best = np.inf
    for a in range(N_LANES):
        col = lane + a - 1
        if col < 0 or col >= N_LANES:
            continue
        c = cells[row + 1, col]
        if blind[c]:
            c = 0
        cost = costs[c]
        if cost < best:
            best = cost
            probs[:] = 0.0
            probs[a] = 1.0
        elif cost == best:
            probs[a] = 1.0
    return probs / np.sum(probs)


def np_plan(cells, costs, start_row, start_lane):
    """Backward DP over (row, lane); returns (min cost, action per step).

    Ties prefer middle, then left, then right.
    """
    n_rows = cells.shape[0]
    value = np.zeros((n_rows, N_LANES))
    choice = np.zeros((n_rows, N_LANES), dtype=np.int64)
    order = np.array([1, 0, 2])
    for r in range(n_rows - 2, start_row - 1, -1):
        for lane in range(N_LANES):
            best = np.inf
            best_a = -1
            for a in order:
                col = lane + a - 1
                if col < 0 or col >= N_LANES:
                    continue
                v = costs[cells[r + 1, col]] + value[r + 1, col]
                if v < best:
                    best = v
                    best_a = a
            value[r, lane] = best
            choice[r, lane] = best_a
    n_steps = n_rows - 1 - start_row
    actions = np.zeros(n_steps, dtype=np.int64)
    lane = start_lane
    for t in range(n_steps):
        a = choice[start_row + t, lane]
        actions[t] = a
        lane += a - 1
    return value[start_row, start_lane], actions


PURE = {
    "mlp_forward": np_mlp_forward,
    "option_pair_forward": np_option_pair_forward,
    "mlp_backward": np_mlp_backward,
    "rmsprop_update": np_rmsprop_update,
    "masked_softmax": np_masked_softmax,
    "featurize": np_featurize,
    "human_probs": np_human_probs,
    "plan": np_plan,
}

_NUMBA_BODIES = dict(PURE, mlp_backward=_nb_mlp_backward, rmsprop_update=_nb_rmsprop_update)


def compiled():
    """Compile and return the numba variants (raises if numba is missing)."""
    if numba is None:
        raise RuntimeError("numba is not installed")
    return {name: numba.njit(cache=True)(fn) for name, fn in _NUMBA_BODIES.items()}


_active = compiled() if USE_NUMBA else PURE

mlp_forward = _active["mlp_forward"]
option_pair_forward = _active["option_pair_forward"]
mlp_backward = _active["mlp_backward"]
rmsprop_update = _active["rmsprop_update"]
masked_softmax = _active["masked_softmax"]
featurize = _active["featurize"]
human_probs = _active["human_probs"]
plan = _active["plan"]

BACKEND = "numba" if USE_NUMBA else "numpy"
