import numpy as np
import pytest

from triage_rl.approximator import (FeedForwardNet, LinearNet, RmsProp, Sgd, TargetSnapshot, load_net,
                                    net_from_dict, net_to_dict, optimizer_from_state, save_net)
from triage_rl.checks import central_difference


def reference_forward(net, x):
    w1 = net.params[: net.n_hidden * net.n_in].reshape(net.n_hidden, net.n_in)
    rest = net.params[net.n_hidden * net.n_in:]
    b1, rest = rest[: net.n_hidden], rest[net.n_hidden:]
    w2 = rest[: net.n_out * net.n_hidden].reshape(net.n_out, net.n_hidden)
    b2 = rest[net.n_out * net.n_hidden:]
    h = [np.tanh(sum(w1[i, j] * x[j] for j in range(net.n_in)) + b1[i]) for i in range(net.n_hidden)]
    return np.array([sum(w2[k, i] * h[i] for i in range(net.n_hidden)) + b2[k] for k in range(net.n_out)])


def test_zero_net_outputs_zero():
    np.testing.assert_array_equal(FeedForwardNet(5, 4, 3).forward(np.ones(5)), 0)


def test_unit_net_at_origin():
    net = FeedForwardNet(1, 1, 1, params=np.array([1.0, 0.0, 1.0, 0.0]))
    assert net.forward(np.zeros(1))[0] == 0.0


def test_forward_matches_reference():
    rng = np.random.default_rng(0)
    net = FeedForwardNet.initialized(4, 3, 2, rng, "standard")
    x = rng.normal(size=4)
    np.testing.assert_allclose(net.forward(x), reference_forward(net, x), atol=1e-12)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = FeedForwardNet.initialized(6, 8, 3, rng, "standard")
    x, w = rng.normal(size=6), rng.normal(size=3)
    _, cache = net.forward_cached(x)
    analytic = net.backward(x, cache, w)
    fd = central_difference(lambda p: float(FeedForwardNet(6, 8, 3, params=p).forward(x) @ w),
                            net.params.copy(), 1e-5)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-9)


def test_backward_linear_in_output_grad():
    rng = np.random.default_rng(2)
    net = FeedForwardNet.initialized(5, 4, 2, rng, "standard")
    x = rng.normal(size=5)
    _, cache = net.forward_cached(x)
    assert not net.backward(x, cache, np.zeros(2)).any()
    g = rng.normal(size=2)
    np.testing.assert_allclose(net.backward(x, cache, 2 * g), 2 * net.backward(x, cache, g))


def test_linear_net_gradient():
    rng = np.random.default_rng(3)
    net = LinearNet(4, 2, bias=True, params=rng.normal(size=10))
    x, w = rng.normal(size=4), rng.normal(size=2)
    fd = central_difference(lambda p: float(LinearNet(4, 2, True, params=p).forward(x) @ w), net.params.copy())
    np.testing.assert_allclose(net.backward(x, None, w), fd, rtol=1e-7)


def test_input_shape_checked():
    with pytest.raises(ValueError):
        FeedForwardNet(3, 2, 1).forward(np.ones(4))
    with pytest.raises(ValueError):
        FeedForwardNet(3, 2, 1, params=np.zeros(3))


def test_init_schemes():
    rng = np.random.default_rng(4)
    net = FeedForwardNet.initialized(76, 256, 3, rng, "scaled")
    assert not net.b1.any() and net.w1.std() == pytest.approx(1 / np.sqrt(76), rel=0.05)
    with pytest.raises(ValueError):
        FeedForwardNet.initialized(2, 2, 2, rng, "glorot")


def test_rmsprop_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    RmsProp(2).step(p, np.zeros(2))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_rmsprop_first_step():
    p = np.zeros(1)
    RmsProp(1, lr=1e-4, rho=0.99, eps=1e-8).step(p, np.ones(1))
    assert p[0] == pytest.approx(-1e-4 / (0.1 + 1e-8), rel=1e-12)


def test_rmsprop_moves_against_gradient():
    p, opt = np.zeros(1), RmsProp(1, lr=1e-3)
    trail = []
    for _ in range(100):
        opt.step(p, np.array([0.5]))
        trail.append(p[0])
    assert np.all(np.diff(trail) < 0)


def test_optimizer_state_roundtrip():
    opt = RmsProp(3, lr=1e-3)
    opt.step(np.zeros(3), np.array([1.0, 2.0, 3.0]))
    again = optimizer_from_state(opt.state_dict())
    np.testing.assert_array_equal(again.acc, opt.acc)
    assert again.steps == 1
    assert isinstance(optimizer_from_state(Sgd(2, 0.1).state_dict()), Sgd)


def test_target_sync_schedule():
    net = FeedForwardNet.initialized(3, 2, 1, np.random.default_rng(5), "standard")
    target = TargetSnapshot(net, sync_interval=5000)
    x = np.ones(3)
    np.testing.assert_array_equal(target.net.forward(x), net.forward(x))
    frozen = target.net.forward(x).copy()
    net.params += 1.0
    for _ in range(4999):
        target.tick(net)
    np.testing.assert_array_equal(target.net.forward(x), frozen)
    assert target.tick(net) and target.syncs == 1
    np.testing.assert_array_equal(target.net.forward(x), net.forward(x))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    for net in (FeedForwardNet.initialized(7, 5, 3, rng, "standard"), LinearNet(4, 2, True, rng.normal(size=10))):
        path = tmp_path / f"{net.kind}.json"
        save_net(net, path)
        np.testing.assert_array_equal(load_net(path).params, net.params)
        assert net_from_dict(net_to_dict(net)).dims == net.dims
