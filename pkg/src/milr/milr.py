"""MI-LR: mask network, combined objective, two-stage training and information maps.

Stage 1 runs the frozen encoder once and caches the local feature grid and the
pooled representation of every sample. Stage 2 trains three attachments
against that cache:

* a critic, whose InfoNCE bound between unmasked local features and the cached
  representation measures the total information at each position;
* a mask network, producing ``alpha`` in (0, 1) that scales the local features;
  the masked grid is pushed through the frozen layers after the tap and must
  still solve the episode, while the KL term penalizes what it carries;
* a Gaussian bottleneck head giving ``p(z | x'_i)`` per position, whose KL to
  N(0, I) is the decision-related information.

The head is fitted by likelihood of the whitened cached representation given
the masked features. The KL term reaches the mask only, and the likelihood
reaches the head only, so the KL penalty cannot be met by collapsing the head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset, Episode, sample_episode
from .errors import (ConfigError, ContractError, DimensionError, EstimationError, FormatError, NonFiniteError,
                     TrainingError)
from .estimators import (BottleneckHead, Critic, gaussian_nll, infonce_lower_bound, infonce_terms,
                         score_matrix, vib_upper_bound)
from .nn import Conv2d, Encoder, Module
from .optim import Adam
from .protonet import loss_from_reprs, write_log
from .tensor import Tensor
from .viz import InfoMap

MASK_MODES = ("learned", "ones", "zeros")


class MaskNetwork(Module):
    """Two 1x1 convolutions with a ReLU between and a sigmoid on top.

    ``mode="ones"`` / ``"zeros"`` pin the mask for saturation checks.
    """

    _children = ("conv1", "conv2")

    def __init__(self, channels: int, hidden: int = 32, seed: int = 0, init_bias: float = 2.0,
                 mode: str = "learned"):
        if mode not in MASK_MODES:
            raise ConfigError(f"mask mode must be one of {MASK_MODES}, got {mode!r}")
        rng = np.random.default_rng([seed, 17])
        self.conv1 = Conv2d(channels, hidden, 1, rng)
        self.conv2 = Conv2d(hidden, channels, 1, rng, gain=0.1)
        self.conv2.bias.data = np.full(channels, float(init_bias))
        self.channels = channels
        self.hidden = hidden
        self.mode = mode

    def __call__(self, locals_: Tensor) -> Tensor:
        x = T._wrap(locals_)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"mask expects K x {self.channels} x h x w, got {x.shape}")
        if self.mode == "ones":
            return Tensor(np.ones(x.shape))
        if self.mode == "zeros":
            return Tensor(np.zeros(x.shape))
        return T.sigmoid(self.conv2(T.relu(self.conv1(x))))


def apply_mask(locals_, alpha) -> Tensor:
    locals_, alpha = T._wrap(locals_), T._wrap(alpha)
    if locals_.shape != alpha.shape:
        raise DimensionError(f"mask shape {alpha.shape} != feature shape {locals_.shape}")
    return locals_ * alpha


class Whitener:
    """Projects representations onto their top principal axes with unit variance."""

    def __init__(self, mean: np.ndarray, projection: np.ndarray):
        self.mean = mean
        self.projection = projection

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def fit(cls, reprs: np.ndarray, dim: int, rel_floor: float = 1e-8) -> "Whitener":
        mean = reprs.mean(axis=0)
        cov = np.cov(reprs - mean, rowvar=False)
        evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        keep = min(dim, int(np.sum(evals > rel_floor * max(evals[0], 1e-300))))
        if keep < 1:
            raise EstimationError("representations have no variance to whiten")
        # fix sign so the fit is reproducible across LAPACK builds
        evecs = evecs * np.where(evecs[np.abs(evecs).argmax(axis=0), range(evecs.shape[1])] < 0, -1.0, 1.0)
        return cls(mean, evecs[:, :keep] / np.sqrt(evals[:keep]))

    def __call__(self, reprs: np.ndarray) -> np.ndarray:
        return (reprs - self.mean) @ self.projection


class FeatureCache:
    """Stage-1 outputs of the frozen encoder, keyed by sample id."""

    def __init__(self, ids, locals_: np.ndarray, reprs: np.ndarray):
        self.ids = np.asarray(ids)
        self.locals = locals_
        self.reprs = reprs
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ContractError("duplicate sample ids in feature cache")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._row

    @property
    def n_reals(self) -> int:
        return self.locals.size + self.reprs.size

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in np.atleast_1d(ids)], dtype=np.intp)
        except KeyError as exc:
            raise ContractError(f"sample {exc.args[0]} is not in the feature cache") from None

    def get(self, ids) -> tuple[np.ndarray, np.ndarray]:
        r = self.rows(ids)
        return self.locals[r], self.reprs[r]


def _require_frozen(encoder: Encoder) -> None:
    if not getattr(encoder, "frozen", False) or any(p.requires_grad for p in encoder.parameters()):
        raise ContractError("MI-LR needs a frozen encoder; call freeze() first")


def stage1_collect(frozen_encoder: Encoder, images: np.ndarray, ids=None, batch_size: int = 64) -> FeatureCache:
    """Cache tap-layer features and representations without recording gradients."""
    _require_frozen(frozen_encoder)
    images = np.asarray(images, dtype=np.float64)
    ids = np.arange(len(images)) if ids is None else np.asarray(ids)
    locs, reps = [], []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out = frozen_encoder(Tensor(images[s:s + batch_size]))
            locs.append(out.local_features.data)
            reps.append(out.representation.data)
    return FeatureCache(ids, np.concatenate(locs), np.concatenate(reps))


@dataclass
class MilrConfig:
    alpha_weight: float = 1.0
    beta_weight: float = 0.01
    episodes: int = 1000
    lr: float = 1e-3
    score_dim: int = 64
    bottleneck_dim: int = 32
    hidden: int = 128
    head_hidden: int = 128
    mask_hidden: int = 32
    mask_init: float = 2.0
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 5
    mask_mode: str = "learned"

    def validate(self) -> "MilrConfig":
        if self.alpha_weight < 0 or self.beta_weight < 0:
            raise ConfigError("alpha_weight and beta_weight must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "MilrConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class MilrState:
    """Learnable MI-LR attachments plus the objective weights."""

    def __init__(self, critic: Critic, head: BottleneckHead, mask: MaskNetwork, whitener: Whitener,
                 config: MilrConfig, trained: bool = False):
        self.critic = critic
        self.head = head
        self.mask = mask
        self.whitener = whitener
        self.config = config
        self.trained = trained

    @property
    def alpha_weight(self) -> float:
        return self.config.alpha_weight

    @property
    def beta_weight(self) -> float:
        return self.config.beta_weight

    @classmethod
    def create(cls, local_dim: int, repr_dim: int, whitener: Whitener, config: MilrConfig, seed: int = 0):
        config.validate()
        critic = Critic(local_dim, repr_dim, config.score_dim, config.hidden, seed)
        head = BottleneckHead(local_dim, whitener.dim, config.head_hidden, seed)
        mask = MaskNetwork(local_dim, config.mask_hidden, seed, config.mask_init, config.mask_mode)
        return cls(critic, head, mask, whitener, config)

    def named_parameters(self):
        for prefix, module in (("critic", self.critic), ("head", self.head), ("mask", self.mask)):
            for name, p in module.named_parameters(prefix + "."):
                yield name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def save(self, path) -> Path:
        meta = {
            "config": asdict(self.config),
            "trained": self.trained,
            "local_dim": self.critic.local_dim,
            "repr_dim": self.critic.repr_dim,
            "whitened_dim": self.whitener.dim,
        }
        params = [(n, p.data) for n, p in self.named_parameters()]
        params += [("whitener.mean", self.whitener.mean), ("whitener.projection", self.whitener.projection)]
        params += [(f"critic.{n}", b) for n, b in self.critic.buffers()]
        return checkpoint.save(path, "milr", meta, params)

    @classmethod
    def load(cls, path) -> "MilrState":
        _, meta, params = checkpoint.load(path, "milr")
        stored = dict(params)
        whitener = Whitener(stored["whitener.mean"], stored["whitener.projection"])
        state = cls.create(meta["local_dim"], meta["repr_dim"], whitener, MilrConfig.from_dict(meta["config"]))
        for name, p in state.named_parameters():
            if name not in stored or stored[name].shape != p.shape:
                raise FormatError(f"MI-LR checkpoint missing or misshaped parameter {name}")
            p.data = stored[name]
        for name, _ in state.critic.buffers():
            setattr(state.critic, name, stored[f"critic.{name}"])
        state.trained = bool(meta["trained"])
        return state


class ObjectiveTerms(NamedTuple):
    total: Tensor      # -task + alpha * nce - beta * kl  (to be maximized)
    task_loss: Tensor
    nce: Tensor
    kl: Tensor
    fit_nll: Tensor    # head likelihood loss, optimized alongside
    accuracy: float
    mean_alpha: float


def milr_objective(episode: Episode, frozen_encoder: Encoder, state: MilrState,
                   cache: FeatureCache) -> ObjectiveTerms:
    _require_frozen(frozen_encoder)
    ids = episode.sample_ids
    locals_np, reprs_np = cache.get(ids)
    locals_, reprs = Tensor(locals_np), Tensor(reprs_np)
    n_s = len(episode.support_ids)

    alpha = state.mask(locals_)
    masked = apply_mask(locals_, alpha)
    z_masked = frozen_encoder.from_tap(masked)
    task = loss_from_reprs(z_masked[:n_s], episode.support_labels, z_masked[n_s:], episode.query_labels)

    nce = infonce_lower_bound(score_matrix(state.critic, locals_, reprs))
    kl = vib_upper_bound(state.head.detached(), masked).mean
    mu, logvar = state.head(masked.detach())
    fit = gaussian_nll(mu, logvar, Tensor(state.whitener(reprs_np)))

    total = -task.loss + state.alpha_weight * nce - state.beta_weight * kl
    return ObjectiveTerms(total, task.loss, nce, kl, fit, task.accuracy, float(alpha.data.mean()))


LOG_COLUMNS = ("step", "task_loss", "nce_bound", "kl_mean", "mean_alpha")


def train_milr(dataset: Dataset, frozen_encoder: Encoder, config: MilrConfig | None = None, seed: int = 0,
               cache: FeatureCache | None = None, log_path=None, checkpoint_path=None):
    """Stage 2: optimize critic, head and mask jointly over sampled episodes.

    Returns ``(state, log)``; ``log`` rows follow :data:`LOG_COLUMNS`.
    """
    config = (config or MilrConfig()).validate()
    _require_frozen(frozen_encoder)
    if cache is None:
        cache = stage1_collect(frozen_encoder, dataset.images)
    enc_cfg = frozen_encoder.config
    whitener = Whitener.fit(cache.reprs, config.bottleneck_dim)
    state = MilrState.create(enc_cfg.tap_channels, enc_cfg.repr_dim, whitener, config, seed)
    state.critic.fit_normalization(cache.locals, cache.reprs)
    opt = Adam(state.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 2])
    log = []
    for step in range(config.episodes):
        episode = sample_episode(dataset, config.n_way, config.k_shot, config.n_query, rng)
        opt.zero_grad()
        try:
            terms = milr_objective(episode, frozen_encoder, state, cache)
            (terms.fit_nll - terms.total).backward()
        except (NonFiniteError, EstimationError) as exc:
            raise TrainingError(f"MI-LR training diverged at step {step}: {exc}") from None
        opt.step()
        log.append((step, terms.task_loss.item(), terms.nce.item(), terms.kl.item(), terms.mean_alpha))
    state.trained = True
    if log_path is not None:
        write_log(log_path, LOG_COLUMNS, log)
    if checkpoint_path is not None:
        state.save(checkpoint_path)
    return state, log


# -- information maps ------------------------------------------------------------

def _require_trained(state: MilrState, allow_untrained: bool) -> None:
    if not (state.trained or allow_untrained):
        raise ContractError("MI-LR state is untrained; pass allow_untrained=True to map anyway")


def total_information_grid(state: MilrState, locals_: np.ndarray, reprs: np.ndarray) -> np.ndarray:
    """Per-location InfoNCE log-ratio terms for a whole contrast batch, ``K x h x w``."""
    K, _, h, w = locals_.shape
    with T.no_grad():
        terms = infonce_terms(score_matrix(state.critic, Tensor(locals_), Tensor(reprs)))
    return terms.data.reshape(K, h, w)


def decision_information_grid(state: MilrState, locals_: np.ndarray) -> np.ndarray:
    """Per-location KL of the bottleneck head on masked features, ``K x h x w``."""
    with T.no_grad():
        masked = apply_mask(Tensor(locals_), state.mask(Tensor(locals_)))
        return vib_upper_bound(state.head, masked).grid.data


def contrast_ids(cache: FeatureCache, sample_id, size: int, seed, batch: int) -> np.ndarray:
    """The sample followed by ``size - 1`` other cached samples, drawn reproducibly."""
    others = cache.ids[cache.ids != sample_id]
    if size - 1 > len(others):
        raise ContractError(f"contrast batch of {size} needs more cached samples than {len(cache)}")
    rng = np.random.default_rng([int(seed), int(sample_id), int(batch)])
    return np.concatenate([[sample_id], rng.choice(others, size - 1, replace=False)])


def total_information_map(state: MilrState, cache: FeatureCache, sample_id, contrast_batches: int = 4,
                          contrast_size: int = 30, seed: int = 0, allow_untrained: bool = False) -> InfoMap:
    _require_trained(state, allow_untrained)
    acc = None
    for b in range(contrast_batches):
        loc, rep = cache.get(contrast_ids(cache, sample_id, contrast_size, seed, b))
        grid = total_information_grid(state, loc, rep)[0]
        acc = grid if acc is None else acc + grid
    return InfoMap(acc / contrast_batches, "total", sample_id)


def decision_information_map(state: MilrState, cache: FeatureCache, sample_id,
                             allow_untrained: bool = False) -> InfoMap:
    _require_trained(state, allow_untrained)
    loc, _ = cache.get([sample_id])
    return InfoMap(decision_information_grid(state, loc)[0], "decision", sample_id)


def redundancy_map(total: InfoMap, decision: InfoMap) -> InfoMap:
    """Total minus decision-related information; negative values are kept."""
    if total.shape != decision.shape:
        raise DimensionError(f"map shapes differ: {total.shape} vs {decision.shape}")
    return InfoMap(total.values - decision.values, "redundant", total.sample_id)


def explain_sample(state: MilrState, cache: FeatureCache, sample_id, contrast_batches: int = 4,
                   contrast_size: int = 30, seed: int = 0) -> dict[str, InfoMap]:
    total = total_information_map(state, cache, sample_id, contrast_batches, contrast_size, seed)
    decision = decision_information_map(state, cache, sample_id)
    return {"total": total, "decision": decision, "redundant": redundancy_map(total, decision)}
