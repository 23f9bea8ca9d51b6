"""Small function approximators with analytic gradients and their optimizers.

Parameters live in one flat float64 vector so optimizers, target snapshots
and checkpoints handle every architecture the same way.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import _kernels


class FeedForwardNet:
    """``out = W2 tanh(W1 x + b1) + b2``."""

    kind = "mlp"

    def __init__(self, n_in: int, n_hidden: int, n_out: int, params: np.ndarray | None = None):
        self.n_in, self.n_hidden, self.n_out = int(n_in), int(n_hidden), int(n_out)
        size = self.n_hidden * self.n_in + self.n_hidden + self.n_out * self.n_hidden + self.n_out
        if params is None:
            params = np.zeros(size)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def initialized(cls, n_in, n_hidden, n_out, rng: np.random.Generator, init: str = "scaled"):
        """``scaled``: N(0, 1/fan_in) weights and zero biases; ``standard``: every parameter N(0, 1)."""
        net = cls(n_in, n_hidden, n_out)
        if init == "standard":
            net.params[:] = rng.standard_normal(net.params.size)
        elif init == "scaled":
            net.w1[:] = rng.standard_normal(net.w1.shape) / math.sqrt(n_in)
            net.w2[:] = rng.standard_normal(net.w2.shape) / math.sqrt(n_hidden)
        else:
            raise ValueError(f"unknown init {init!r}")
        return net

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.n_in, self.n_hidden, self.n_out)

    @property
    def w1(self):
        return self.params[: self.n_hidden * self.n_in].reshape(self.n_hidden, self.n_in)

    @property
    def b1(self):
        off = self.n_hidden * self.n_in
        return self.params[off: off + self.n_hidden]

    @property
    def w2(self):
        off = self.n_hidden * self.n_in + self.n_hidden
        return self.params[off: off + self.n_out * self.n_hidden].reshape(self.n_out, self.n_hidden)

    @property
    def b2(self):
        return self.params[self.params.size - self.n_out:]

    def _check(self, x):
        if x.shape != (self.n_in,):
            raise ValueError(f"input has shape {x.shape}, net expects ({self.n_in},)")

    def forward_cached(self, x: np.ndarray):
        """Output plus whatever ``backward`` needs."""
        self._check(x)
        hidden, out = _kernels.mlp_forward(self.params, x, self.n_in, self.n_hidden, self.n_out)
        return out, hidden

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(self, x: np.ndarray, cache, output_grad: np.ndarray) -> np.ndarray:
        """Gradient of ``output . output_grad`` with respect to the parameters."""
        output_grad = np.asarray(output_grad, dtype=np.float64).reshape(self.n_out)
        return _kernels.mlp_backward(self.params, x, cache, output_grad,
                                     self.n_in, self.n_hidden, self.n_out)

    def copy(self):
        return type(self)(*self.dims, params=self.params.copy())


class LinearNet:
    """``out = W x (+ b)``; a tabular softmax actor or linear critic on one-hot features."""

    kind = "linear"

    def __init__(self, n_in: int, n_out: int, bias: bool = False, params: np.ndarray | None = None):
        self.n_in, self.n_out, self.bias = int(n_in), int(n_out), bool(bias)
        size = self.n_in * self.n_out + (self.n_out if self.bias else 0)
        if params is None:
            params = np.zeros(size)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.n_in, self.n_out)

    @property
    def weights(self):
        return self.params[: self.n_in * self.n_out].reshape(self.n_out, self.n_in)

    def forward_cached(self, x):
        if x.shape != (self.n_in,):
            raise ValueError(f"input has shape {x.shape}, net expects ({self.n_in},)")
        out = self.weights @ x
        if self.bias:
            out = out + self.params[self.n_in * self.n_out:]
        return out, None

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, x, cache, output_grad):
        output_grad = np.asarray(output_grad, dtype=np.float64).reshape(self.n_out)
        grad = np.empty_like(self.params)
        grad[: self.n_in * self.n_out] = np.outer(output_grad, x).ravel()
        if self.bias:
            grad[self.n_in * self.n_out:] = output_grad
        return grad

    def copy(self):
        return LinearNet(self.n_in, self.n_out, self.bias, params=self.params.copy())


class RmsProp:
    """``acc <- rho acc + (1-rho) g^2;  p <- p - lr g / (sqrt(acc) + eps)``."""

    def __init__(self, size: int, lr: float = 1e-4, rho: float = 0.99, eps: float = 1e-8):
        self.lr, self.rho, self.eps = float(lr), float(rho), float(eps)
        self.acc = np.zeros(size)
        self.steps = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        _kernels.rmsprop_update(params, self.acc, grad, self.lr, self.rho, self.eps)
        self.steps += 1

    def state_dict(self) -> dict:
        return {"kind": "rmsprop", "lr": self.lr, "rho": self.rho, "eps": self.eps,
                "steps": self.steps, "acc": self.acc.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "RmsProp":
        opt = cls(len(state["acc"]), state["lr"], state["rho"], state["eps"])
        opt.acc[:] = state["acc"]
        opt.steps = state["steps"]
        return opt


class Sgd:
    """Plain gradient descent with step ``lr / (1 + steps / decay)``."""

    def __init__(self, size: int, lr: float = 0.01, decay: float | None = None):
        self.lr, self.decay = float(lr), decay
        self.steps = 0

    def step(self, params, grad):
        lr = self.lr if self.decay is None else self.lr / (1.0 + self.steps / self.decay)
        params -= lr * grad
        self.steps += 1

    def state_dict(self):
        return {"kind": "sgd", "lr": self.lr, "decay": self.decay, "steps": self.steps}

    @classmethod
    def from_state(cls, state):
        opt = cls(0, state["lr"], state["decay"])
        opt.steps = state["steps"]
        return opt


def optimizer_from_state(state: dict):
    return {"rmsprop": RmsProp, "sgd": Sgd}[state["kind"]].from_state(state)


class TargetSnapshot:
    """Frozen copy of a net, refreshed every ``sync_interval`` ticks."""

    def __init__(self, net, sync_interval: int = 5000):
        if sync_interval < 1:
            raise ValueError("sync_interval must be positive")
        self.net = net.copy()
        self.sync_interval = int(sync_interval)
        self.ticks = 0
        self.syncs = 0

    def sync(self, source) -> "TargetSnapshot":
        self.net.params[:] = source.params
        self.syncs += 1
        return self

    def tick(self, source) -> bool:
        """Count one optimizer step on ``source``; sync on interval boundaries."""
        self.ticks += 1
        if self.ticks % self.sync_interval == 0:
            self.sync(source)
            return True
        return False


def sync_target(snapshot: TargetSnapshot, net) -> TargetSnapshot:
    return snapshot.sync(net)


# -- checkpoints -------------------------------------------------------------

def net_to_dict(net) -> dict:
    doc = {"kind": net.kind, "dims": list(net.dims), "params": net.params.tolist()}
    if net.kind == "linear":
        doc["bias"] = net.bias
    return doc


def net_from_dict(doc: dict):
    params = np.array(doc["params"], dtype=np.float64)
    if doc["kind"] == "mlp":
        return FeedForwardNet(*doc["dims"], params=params)
    if doc["kind"] == "linear":
        return LinearNet(*doc["dims"], bias=doc.get("bias", False), params=params)
    raise ValueError(f"unknown net kind {doc['kind']!r}")


def save_net(net, path) -> None:
    # json writes float repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(net_to_dict(net)))


def load_net(path):
    return net_from_dict(json.loads(Path(path).read_text()))
