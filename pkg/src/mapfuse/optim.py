"""Weight initialisation and first-order optimisers."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import FLOAT, Parameter


def msra_init(param: Parameter, fan_in: int, rng_seed) -> None:
    """Fill ``param`` with N(0, 2/fan_in) draws (He et al. initialisation).

    Draws are made in float64 and rounded so that a given seed produces the
    same buffer on every platform.
    """
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = np.random.default_rng(rng_seed)
    std = math.sqrt(2.0 / fan_in)
    param.data[...] = (rng.standard_normal(param.shape) * std).astype(FLOAT)


def _require_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name!r} has no gradient")


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain gradient descent: ``w -= lr * lr_scale * grad``."""
    params = list(params)
    _require_grads(params)
    for p in params:
        p.data -= FLOAT(lr * p.lr_scale) * p.grad


class SGD:
    def __init__(self, params: Iterable[Parameter]):
        self.params = list(params)

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam:
    """Adam with bias correction; moment buffers persist between steps."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        _require_grads(self.params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= FLOAT(b1)
            m += FLOAT(1.0 - b1) * g
            v *= FLOAT(b2)
            v += FLOAT(1.0 - b2) * (g * g)
            step = (m / FLOAT(c1)) / (np.sqrt(v / FLOAT(c2)) + FLOAT(self.eps))
            p.data -= FLOAT(lr * p.lr_scale) * step

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(params: Sequence[Parameter], lr: float, state: Adam | None = None, **kwargs) -> Adam:
    """Functional wrapper: one Adam update, returning the (possibly new) state."""
    if state is None:
        state = Adam(params, **kwargs)
    state.step(lr)
    return state
