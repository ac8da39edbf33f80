"""First-order optimizers over lists of parameter arrays (updated in place)."""

from __future__ import annotations

import numpy as np


class SGD:
    name = "sgd"

    def __init__(self, learning_rate=1e-2):
        self.learning_rate = learning_rate

    def step(self, params, grads):
        lr = self.learning_rate
        if lr == 0:
            return
        for p, g in zip(params, grads):
            p -= lr * g

    def state(self) -> dict:
        return {}

    def load_state(self, state: dict, params) -> None:
        pass


class Adam:
    name = "adam"

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.learning_rate * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if lr_t != 0:
                p -= (lr_t * m / (np.sqrt(v) + self.epsilon)).astype(p.dtype, copy=False)

    def state(self) -> dict:
        if self.m is None:
            return {"t": self.t}
        out = {"t": self.t}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{k}"] = m
            out[f"v{k}"] = v
        return out

    def load_state(self, state: dict, params) -> None:
        self.t = int(state.get("t", 0))
        if "m0" in state:
            self.m = [np.array(state[f"m{k}"], dtype=p.dtype) for k, p in enumerate(params)]
            self.v = [np.array(state[f"v{k}"], dtype=p.dtype) for k, p in enumerate(params)]
        else:
            self.m = self.v = None


def make_optimizer(name: str, learning_rate: float):
    if name == "adam":
        return Adam(learning_rate)
    if name == "sgd":
        return SGD(learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")
