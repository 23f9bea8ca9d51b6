"""The compiled kernels agree with the numpy reference bodies."""

import os
import subprocess
import sys

import numpy as np
import pytest

from triage_rl import _kernels

pytestmark = pytest.mark.skipif(not _kernels.NUMBA_AVAILABLE, reason="numba not installed")

COST = np.array([0.0, 2.0, 4.0, 10.0])


@pytest.fixture(scope="module")
def fast():
    return _kernels.compiled()


def net_case(rng, n_in=76, n_hidden=32, n_out=3):
    size = n_hidden * n_in + n_hidden + n_out * n_hidden + n_out
    return rng.normal(size=size) * 0.3, rng.integers(0, 2, n_in).astype(float), n_in, n_hidden, n_out


def test_network_kernels(fast):
    rng = np.random.default_rng(0)
    params, x, n_in, n_hidden, n_out = net_case(rng)
    h_ref, y_ref = _kernels.np_mlp_forward(params, x, n_in, n_hidden, n_out)
    h, y = fast["mlp_forward"](params, x, n_in, n_hidden, n_out)
    np.testing.assert_allclose(h, h_ref, atol=1e-12)
    np.testing.assert_allclose(y, y_ref, atol=1e-12)
    gout = rng.normal(size=n_out)
    np.testing.assert_allclose(fast["mlp_backward"](params, x, h, gout, n_in, n_hidden, n_out),
                               _kernels.np_mlp_backward(params, x, h, gout, n_in, n_hidden, n_out), atol=1e-12)
    qparams = net_case(rng, 78, 16, 1)[0]
    s = rng.integers(0, 2, 76).astype(float)
    for a, b in zip(fast["option_pair_forward"](qparams, s, 16), _kernels.np_option_pair_forward(qparams, s, 16)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_rmsprop_kernel(fast):
    rng = np.random.default_rng(1)
    p1 = rng.normal(size=50)
    p2, a1 = p1.copy(), rng.uniform(size=50)
    a2 = a1.copy()
    g = rng.normal(size=50) * (rng.uniform(size=50) < 0.5)  # half the entries exactly zero
    _kernels.np_rmsprop_update(p1, a1, g, 1e-3, 0.99, 1e-8)
    fast["rmsprop_update"](p2, a2, g, 1e-3, 0.99, 1e-8)
    np.testing.assert_allclose(p2, p1, atol=1e-14)
    np.testing.assert_allclose(a2, a1, atol=1e-14)


def test_world_kernels(fast):
    rng = np.random.default_rng(2)
    for _ in range(20):
        cells = rng.integers(0, 4, size=(21, 3)).astype(np.int8)
        blind = rng.uniform(size=4) < 0.3
        blind[0] = False
        row, lane = int(rng.integers(0, 20)), int(rng.integers(0, 3))
        for ego in (False, True):
            a, b = np.empty(76), np.empty(76)
            _kernels.np_featurize(cells, row, lane, blind, ego, a)
            fast["featurize"](cells, row, lane, blind, ego, b)
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(fast["human_probs"](cells, row, lane, blind, COST),
                                      _kernels.np_human_probs(cells, row, lane, blind, COST))
        ref_cost, ref_plan = _kernels.np_plan(cells, COST, 0, 1)
        cost, plan = fast["plan"](cells, COST, 0, 1)
        assert cost == ref_cost
        np.testing.assert_array_equal(plan, ref_plan)
    logits, legal = rng.normal(size=3), np.array([True, False, True])
    np.testing.assert_allclose(fast["masked_softmax"](logits, legal), _kernels.np_masked_softmax(logits, legal))


def test_env_flag_selects_numpy_backend():
    code = "from triage_rl import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, TRIAGE_RL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
