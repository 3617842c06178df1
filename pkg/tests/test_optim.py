import math

import numpy as np
import pytest

from mapfuse.errors import UsageError
from mapfuse.optim import SGD, Adam, adam_step, msra_init, sgd_step
from mapfuse.tensor import Parameter


def param(value, grad=None, shape=(1,)):
    p = Parameter(np.full(shape, value, np.float32), "p")
    if grad is not None:
        p.grad[...] = grad
    return p


class TestInit:
    def test_fan_in_two_gives_unit_std(self):
        p = Parameter(np.zeros(200_000, np.float32), "w")
        msra_init(p, 2, 0)
        assert p.data.std() == pytest.approx(1.0, rel=0.01)

    def test_empirical_std(self):
        p = Parameter(np.zeros(100_000, np.float32), "w")
        msra_init(p, 50, 3)
        assert abs(p.data.std() / math.sqrt(2 / 50) - 1) < 0.05
        assert abs(p.data.mean()) < 0.01

    def test_same_seed_same_bits(self):
        a, b = Parameter(np.zeros((4, 3, 3, 3), np.float32), "a"), Parameter(np.zeros((4, 3, 3, 3), np.float32), "b")
        msra_init(a, 27, 11)
        msra_init(b, 27, 11)
        assert a.data.tobytes() == b.data.tobytes()

    def test_fan_in_positive(self):
        with pytest.raises(ValueError):
            msra_init(param(0.0), 0, 0)


class TestSGD:
    def test_closed_form_step(self):
        p = param(1.0, 0.5)
        sgd_step([p], 0.01)
        assert p.data[0] == pytest.approx(0.995)

    def test_zero_gradient(self):
        p = param(2.0, 0.0)
        SGD([p]).step(0.1)
        assert p.data[0] == 2.0

    def test_lr_scale(self):
        p = param(1.0, 1.0)
        p.lr_scale = 0.5
        sgd_step([p], 0.1)
        assert p.data[0] == pytest.approx(0.95)

    def test_missing_gradient(self):
        p = param(1.0)
        p.grad = None
        with pytest.raises(UsageError):
            sgd_step([p], 0.1)


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = param(0.0, 1.0)
        adam_step([p], 0.01)
        # bias-corrected moments are m=1, v=1, so the step is lr / (1 + eps)
        assert p.data[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-6)

    def test_zero_gradient_history(self):
        p = param(3.0, 0.0)
        opt = Adam([p])
        for _ in range(5):
            opt.step(0.01)
        assert p.data[0] == 3.0

    def test_state_persists(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=4)
        p = param(0.0)
        opt = Adam([p])
        m = v = 0.0
        w = 0.0
        for t, g in enumerate(grads, start=1):
            p.grad[...] = g
            opt.step(0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert opt.t == 4
        assert p.data[0] == pytest.approx(w, rel=1e-5)

    def test_functional_wrapper_returns_state(self):
        p = param(0.0, 1.0)
        state = adam_step([p], 0.01)
        again = adam_step([p], 0.01, state)
        assert again is state and state.t == 2
