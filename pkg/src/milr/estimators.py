"""Contrastive lower bound and Gaussian KL upper bound on local/global information.

Local features are the ``N = h*w`` positions of a ``K x C x h x w`` feature
grid; the representation is one ``d``-vector per sample. Scores are laid out
with local ``k*N + n`` (sample ``k``, position ``n``) as the row and each
sample's representation as a column.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, EstimationError, NonFiniteError
from .nn import MLP, Conv2d, Module
from .optim import Adam
from .tensor import Tensor

LOGVAR_CLAMP = 10.0


class Critic(Module):
    """Separable critic: ``score(l, z) = g(l) . h(z)`` with two small MLPs."""

    _children = ("local_projector", "repr_projector")

    def __init__(self, local_dim: int, repr_dim: int, score_dim: int = 64, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.local_projector = MLP(local_dim, hidden, score_dim, rng)
        self.repr_projector = MLP(repr_dim, hidden, score_dim, rng)
        self.local_dim = local_dim
        self.repr_dim = repr_dim
        self.score_dim = score_dim
        self.hidden = hidden
        # fixed input standardization, set from data by fit_normalization()
        self.local_shift = np.zeros(local_dim)
        self.local_scale = np.ones(local_dim)
        self.repr_shift = np.zeros(repr_dim)
        self.repr_scale = np.ones(repr_dim)

    def fit_normalization(self, locals_: np.ndarray, reprs: np.ndarray, eps: float = 1e-6) -> "Critic":
        """Standardize each local channel and each representation coordinate."""
        flat = np.moveaxis(np.asarray(locals_), 1, -1).reshape(-1, self.local_dim)
        self.local_shift = flat.mean(axis=0)
        self.local_scale = flat.std(axis=0) + eps
        self.repr_shift = reprs.mean(axis=0)
        self.repr_scale = reprs.std(axis=0) + eps
        return self

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("local_shift", self.local_shift), ("local_scale", self.local_scale),
                ("repr_shift", self.repr_shift), ("repr_scale", self.repr_scale)]

    def project_locals(self, rows: Tensor) -> Tensor:
        return self.local_projector((rows - self.local_shift) / self.local_scale)

    def project_reprs(self, reprs: Tensor) -> Tensor:
        return self.repr_projector((reprs - self.repr_shift) / self.repr_scale)

    def zero_(self) -> "Critic":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


@dataclass
class ScoreBlock:
    scores: Tensor            # (N*K) x K
    positive_of: np.ndarray   # row -> column of its own sample
    n_local: int
    n_samples: int


def flatten_locals(locals_: Tensor) -> Tensor:
    """``K x C x h x w`` -> ``(K*h*w) x C`` with sample-major row order."""
    locals_ = T._wrap(locals_)
    if locals_.ndim != 4:
        raise DimensionError(f"local features must be K x C x h x w, got {locals_.shape}")
    K, C, h, w = locals_.shape
    return T.reshape(T.transpose(locals_, (0, 2, 3, 1)), (K * h * w, C))


def score_matrix(critic: Critic, locals_: Tensor, reprs: Tensor) -> ScoreBlock:
    locals_, reprs = T._wrap(locals_), T._wrap(reprs)
    if locals_.ndim != 4 or reprs.ndim != 2:
        raise DimensionError("score_matrix needs K x C x h x w locals and K x d representations")
    K, C, h, w = locals_.shape
    if reprs.shape[0] != K:
        raise DimensionError(f"batch sizes differ: {K} local grids, {reprs.shape[0]} representations")
    if C != critic.local_dim or reprs.shape[1] != critic.repr_dim:
        raise DimensionError(f"critic expects ({critic.local_dim}, {critic.repr_dim}) inputs, got ({C}, {reprs.shape[1]})")
    n = h * w
    g = critic.project_locals(flatten_locals(locals_))
    hz = critic.project_reprs(reprs)
    scores = T.matmul(g, T.transpose(hz))
    return ScoreBlock(scores, np.repeat(np.arange(K), n), n, K)


def infonce_terms(block: ScoreBlock) -> Tensor:
    """Per-local log-ratio ``s(i, j_i) - logsumexp_r s(r, j_i) + ln(N*K)``.

    The contrast for each positive column runs over all ``N*K`` local rows.
    """
    scores = block.scores
    rows = scores.shape[0]
    if rows != block.n_local * block.n_samples or scores.shape[1] != block.n_samples:
        raise DimensionError(f"score block has shape {scores.shape}, expected ({block.n_local * block.n_samples}, {block.n_samples})")
    if not np.all(np.isfinite(scores.data)):
        raise EstimationError("non-finite scores")
    try:
        # centring each column on its (constant) max makes uniform scores cancel exactly
        shifted = scores - scores.data.max(axis=0)
        lse = T.logsumexp(shifted, axis=0)
        pos = T.take(shifted, (np.arange(rows), block.positive_of))
        return pos - T.take(lse, block.positive_of) + math.log(rows)
    except NonFiniteError as exc:
        raise EstimationError(str(exc)) from None


def infonce_lower_bound(block: ScoreBlock) -> Tensor:
    """InfoNCE lower bound in nats; never exceeds ``ln(N*K)``."""
    return T.mean(infonce_terms(block))


class BottleneckHead(Module):
    """Per-location diagonal Gaussian ``p(z | x_i)`` from 1x1 convolutions.

    With ``hidden > 0`` a shared 1x1 conv + ReLU precedes the mean and
    log-variance heads.
    """

    def __init__(self, local_dim: int, bottleneck_dim: int = 32, hidden: int = 0, seed: int = 0):
        rng = np.random.default_rng([seed, 13])
        self.trunk = Conv2d(local_dim, hidden, 1, rng) if hidden else None
        width = hidden or local_dim
        self.mean_head = Conv2d(width, bottleneck_dim, 1, rng, gain=1.0)
        self.logvar_head = Conv2d(width, bottleneck_dim, 1, rng, gain=1.0)
        self.logvar_head.weight.data *= 0.1
        self._children = (("trunk",) if hidden else ()) + ("mean_head", "logvar_head")
        self.local_dim = local_dim
        self.bottleneck_dim = bottleneck_dim
        self.hidden = hidden

    def __call__(self, locals_: Tensor) -> tuple[Tensor, Tensor]:
        x = T._wrap(locals_)
        if x.ndim != 4 or x.shape[1] != self.local_dim:
            raise DimensionError(f"bottleneck head expects K x {self.local_dim} x h x w, got {x.shape}")
        if self.trunk is not None:
            x = T.relu(self.trunk(x))
        mu = self.mean_head(x)
        logvar = T.clip(self.logvar_head(x), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return mu, logvar

    def set_standard_normal(self) -> "BottleneckHead":
        """Make every location map to N(0, I)."""
        for head in (self.mean_head, self.logvar_head):
            head.weight.data = np.zeros_like(head.weight.data)
            head.bias.data = np.zeros_like(head.bias.data)
        return self


def gaussian_kl_to_standard(mu: Tensor, logvar: Tensor, axis: int = 1) -> Tensor:
    """``KL(N(mu, diag exp(logvar)) || N(0, I))`` summed over ``axis``."""
    mu, logvar = T._wrap(mu), T._wrap(logvar)
    return 0.5 * T.tsum(T.square(mu) + T.exp(logvar) - logvar - 1.0, axis=axis)


def gaussian_kl_scalar(mu: float, var: float) -> float:
    """Closed-form ``KL(N(mu, var) || N(0, 1))`` for scalars."""
    return 0.5 * (mu * mu + var - math.log(var) - 1.0)


class VibResult(NamedTuple):
    mean: Tensor   # scalar
    grid: Tensor   # K x h x w


def vib_upper_bound(head: BottleneckHead, locals_: Tensor) -> VibResult:
    mu, logvar = head(locals_)
    grid = gaussian_kl_to_standard(mu, logvar, axis=1)
    return VibResult(T.mean(grid), grid)


def gaussian_nll(mu: Tensor, logvar: Tensor, target: Tensor) -> Tensor:
    """Mean over locations of the diagonal Gaussian negative log-likelihood (no ln 2pi term).

    ``mu``/``logvar`` are ``K x d x h x w``; ``target`` is ``K x d`` and is
    shared by every location of its sample.
    """
    target = T._wrap(target)
    K, d = target.shape
    t = T.reshape(target, (K, d, 1, 1))
    per = 0.5 * T.tsum(logvar + T.square(t - mu) * T.exp(-logvar), axis=1)
    return T.mean(per)


# -- analytic calibration ------------------------------------------------------

class GaussianPairs(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    mutual_information: float


def gaussian_pair_mi(rho: float) -> float:
    return -0.5 * math.log1p(-rho * rho)


def gaussian_pair_oracle(rho: float, n_samples: int, seed=0) -> GaussianPairs:
    """Standard bivariate Gaussian samples with correlation ``rho``."""
    if not abs(rho) < 1:
        raise ConfigError(f"|rho| must be < 1, got {rho}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_samples)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n_samples)
    return GaussianPairs(x, y, gaussian_pair_mi(rho))


class CalibrationResult(NamedTuple):
    rho: float
    analytic_mi: float
    estimate: float
    steps: int
    estimator: str = "infonce"


def _as_grid(v: np.ndarray) -> Tensor:
    return Tensor(v.reshape(-1, 1, 1, 1))


def calibrate_infonce(rho: float, steps: int = 3000, seed: int = 0, batch_size: int = 256,
                      eval_batches: int = 40, lr: float = 1e-3, score_dim: int = 64,
                      hidden: int = 128) -> CalibrationResult:
    """Train a critic on fresh Gaussian pairs; report the bound on held-out batches."""
    critic = Critic(1, 1, score_dim, hidden, seed)
    opt = Adam(critic.parameters(), lr=lr)
    for step in range(steps):
        pairs = gaussian_pair_oracle(rho, batch_size, seed=[seed, 0, step])
        opt.zero_grad()
        bound = infonce_lower_bound(score_matrix(critic, _as_grid(pairs.x), Tensor(pairs.y[:, None])))
        (-bound).backward()
        opt.step()
    with T.no_grad():
        vals = []
        for b in range(eval_batches):
            pairs = gaussian_pair_oracle(rho, batch_size, seed=[seed, 1, b])
            vals.append(infonce_lower_bound(
                score_matrix(critic, _as_grid(pairs.x), Tensor(pairs.y[:, None]))).item())
    return CalibrationResult(rho, gaussian_pair_mi(rho), float(np.mean(vals)), steps)


def calibrate_vib(rho: float, steps: int = 2000, seed: int = 0, batch_size: int = 256,
                  eval_samples: int = 100_000, lr: float = 1e-2) -> CalibrationResult:
    """Fit ``p(y | x)`` by likelihood, then evaluate the KL bound against N(0, 1)."""
    head = BottleneckHead(1, 1, hidden=0, seed=seed)
    opt = Adam(head.parameters(), lr=lr)
    for step in range(steps):
        pairs = gaussian_pair_oracle(rho, batch_size, seed=[seed, 2, step])
        opt.lr = lr * (1.0 - 0.95 * step / steps)  # anneal so the fit settles instead of jittering
        opt.zero_grad()
        mu, logvar = head(_as_grid(pairs.x))
        gaussian_nll(mu, logvar, Tensor(pairs.y[:, None])).backward()
        opt.step()
    pairs = gaussian_pair_oracle(rho, eval_samples, seed=[seed, 3])
    with T.no_grad():
        est = vib_upper_bound(head, _as_grid(pairs.x)).mean.item()
    return CalibrationResult(rho, gaussian_pair_mi(rho), est, steps, "vib")


def write_calibration_csv(path, results) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "rho", "analytic_mi", "estimated_bound", "steps"])
        for r in results:
            w.writerow([r.estimator, repr(float(r.rho)), repr(r.analytic_mi), repr(r.estimate), r.steps])
    return path
