import numpy as np
import pytest

from milr.errors import ConfigError, ContractError
from milr.optim import Adam, AdamState, adam_step
from milr.tensor import Tensor


def test_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0, 3.0])]
    state = AdamState.zeros_like(p)
    for _ in range(5):
        p = adam_step(p, [np.zeros(3)], state, lr=0.1)
    assert np.array_equal(p[0], [1.0, -2.0, 3.0])


def test_constant_gradient_step_tends_to_lr_sign():
    p = [np.zeros(2)]
    state = AdamState.zeros_like(p)
    g = np.array([0.3, -7.0])
    for _ in range(2000):
        prev = p[0]
        p = adam_step(p, [g], state, lr=0.01)
    step = p[0] - prev
    assert np.allclose(step, -0.01 * np.sign(g), rtol=1e-6)


def test_one_step_matches_formula():
    p0, g = np.array([0.5, -1.5]), np.array([0.2, 0.4])
    m0, v0 = np.array([0.1, -0.1]), np.array([0.01, 0.02])
    state = AdamState([m0.copy()], [v0.copy()], t=3)
    lr, b1, b2, eps = 0.05, 0.8, 0.99, 1e-6
    new = adam_step([p0], [g], state, lr, b1, b2, eps)[0]
    m = b1 * m0 + (1 - b1) * g
    v = b2 * v0 + (1 - b2) * g ** 2
    expected = p0 - lr * (m / (1 - b1 ** 4)) / (np.sqrt(v / (1 - b2 ** 4)) + eps)
    assert np.allclose(new, expected, rtol=0, atol=1e-15)
    assert state.t == 4


@pytest.mark.parametrize("lr", [0.0, -1e-3])
def test_non_positive_lr(lr):
    with pytest.raises(ConfigError):
        adam_step([np.zeros(1)], [np.zeros(1)], AdamState.zeros_like([np.zeros(1)]), lr)
    with pytest.raises(ConfigError):
        Adam([Tensor(np.zeros(1), requires_grad=True)], lr=lr)


def test_frozen_parameters_rejected():
    with pytest.raises(ContractError):
        Adam([Tensor(np.zeros(2), requires_grad=False)])
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p])
    p.requires_grad = False
    with pytest.raises(ContractError):
        opt.step()


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)
