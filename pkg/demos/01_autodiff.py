"""Reverse-mode autodiff on numpy: fit a line, then check a conv gradient numerically."""

import numpy as np

from milr import tensor as T
from milr.optim import Adam
from milr.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny regression: y = 3x - 1 plus noise.
x = rng.uniform(-1, 1, (64, 1))
y = 3 * x - 1 + 0.05 * rng.standard_normal((64, 1))
w = Tensor(np.zeros((1, 1)), requires_grad=True)
b = Tensor(np.zeros(1), requires_grad=True)
opt = Adam([w, b], lr=0.1)
for step in range(300):
    opt.zero_grad()
    loss = T.mean(T.square(T.matmul(Tensor(x), w) + b - Tensor(y)))
    loss.backward()
    opt.step()
print(f"fitted slope {w.data.item():.3f}, intercept {b.data.item():.3f}, mse {loss.item():.4f}")

# Analytic versus central-difference gradient of a convolution.
img = rng.standard_normal((2, 3, 6, 6))
kernel = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
T.tsum(T.square(T.conv2d(Tensor(img), kernel, padding=1))).backward()
h, idx = 1e-6, (1, 2, 0, 1)


def value(k):
    return T.tsum(T.square(T.conv2d(Tensor(img), Tensor(k), padding=1))).item()


plus, minus = kernel.data.copy(), kernel.data.copy()
plus[idx] += h
minus[idx] -= h
numeric = (value(plus) - value(minus)) / (2 * h)
print(f"conv kernel gradient at {idx}: analytic {kernel.grad[idx]:.6f}, numeric {numeric:.6f}")

# Non-finite values are caught at the op that produced them.
try:
    T.log(Tensor([-1.0]))
except Exception as exc:  # NonFiniteError
    print(f"{type(exc).__name__}: {exc}")
