"""Prototypical-network few-shot classifier over the encoder."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .checkpoint import save_encoder
from .data import Dataset, Episode, sample_episode
from .errors import ContractError, DimensionError, NonFiniteError, TrainingError
from .nn import Encoder, EncoderConfig
from .optim import Adam
from .tensor import Tensor


class PrototypeSet(NamedTuple):
    prototypes: Tensor  # n_way x d
    class_ids: np.ndarray


def compute_prototypes(support_reprs: Tensor, support_labels) -> PrototypeSet:
    """Per-class mean of the support embeddings, classes in ascending id order."""
    support_reprs = T._wrap(support_reprs)
    labels = np.asarray(support_labels)
    if support_reprs.ndim != 2 or len(labels) != support_reprs.shape[0]:
        raise DimensionError("support_reprs must be (n_support, d) with one label per row")
    class_ids, counts = np.unique(labels, return_counts=True)
    if len(set(counts.tolist())) != 1:
        raise ContractError(f"unbalanced support set: counts {dict(zip(class_ids.tolist(), counts.tolist()))}")
    k = int(counts[0])
    if k == 1:
        order = np.argsort(labels, kind="stable")
        return PrototypeSet(T.take(support_reprs, order), class_ids)
    rows = [T.mean(T.take(support_reprs, np.flatnonzero(labels == c)), axis=0, keepdims=True) for c in class_ids]
    return PrototypeSet(T.concat(rows, axis=0), class_ids)


def prototype_logits(query_reprs: Tensor, prototypes: PrototypeSet) -> Tensor:
    """Negative squared Euclidean distance from each query to each prototype."""
    q = T._wrap(query_reprs)
    p = prototypes.prototypes
    if q.ndim == 1:
        q = T.reshape(q, (1, -1))
    if q.shape[1] != p.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != prototype dim {p.shape[1]}")
    diff = T.reshape(q, (q.shape[0], 1, q.shape[1])) - T.reshape(p, (1,) + p.shape)
    return -T.tsum(T.square(diff), axis=2)


def classify_query(query_repr: Tensor, prototypes: PrototypeSet) -> Tensor:
    """Softmax over negative squared distances; a 1-d query gives a 1-d vector."""
    single = T._wrap(query_repr).ndim == 1
    probs = T.softmax(prototype_logits(query_repr, prototypes), axis=1)
    return T.reshape(probs, (-1,)) if single else probs


class EpisodeResult(NamedTuple):
    loss: Tensor
    accuracy: float


def loss_from_reprs(support_reprs: Tensor, support_labels, query_reprs: Tensor, query_labels) -> EpisodeResult:
    """Mean query cross-entropy and accuracy given already-computed embeddings."""
    protos = compute_prototypes(support_reprs, support_labels)
    logp = T.log_softmax(prototype_logits(query_reprs, protos), axis=1)
    lookup = {int(c): i for i, c in enumerate(protos.class_ids)}
    try:
        target = np.array([lookup[int(y)] for y in query_labels])
    except KeyError as exc:
        raise ContractError(f"query label {exc.args[0]} not in support set") from None
    picked = T.take(logp, (np.arange(len(target)), target))
    loss = -T.mean(picked)
    acc = float(np.mean(np.argmax(logp.data, axis=1) == target))
    return EpisodeResult(loss, acc)


def episode_loss(episode: Episode, encoder: Encoder) -> EpisodeResult:
    n_s = len(episode.support_labels)
    images = np.concatenate([episode.support_images, episode.query_images])
    z = encoder(Tensor(images)).representation
    return loss_from_reprs(z[:n_s], episode.support_labels, z[n_s:], episode.query_labels)


@dataclass
class ProtonetConfig:
    episodes: int = 2000
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 5
    lr: float = 1e-3


def train_protonet(dataset: Dataset, config: ProtonetConfig | None = None, seed: int = 0,
                   encoder_config: EncoderConfig | None = None,
                   checkpoint_path=None, log_path=None):
    """Episodic training with Adam.

    Returns ``(encoder, log)`` where ``log`` is a list of
    ``(episode, loss, accuracy)`` tuples.
    """
    config = config or ProtonetConfig()
    if encoder_config is None:
        encoder_config = EncoderConfig(input_channels=dataset.images.shape[1], input_size=dataset.image_size)
    encoder = Encoder(encoder_config, seed)
    opt = Adam(encoder.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 1])
    log = []
    for ep in range(config.episodes):
        episode = sample_episode(dataset, config.n_way, config.k_shot, config.n_query, rng)
        opt.zero_grad()
        try:
            result = episode_loss(episode, encoder)
            result.loss.backward()
        except NonFiniteError as exc:
            raise TrainingError(f"protonet training diverged at episode {ep}: {exc}") from None
        opt.step()
        log.append((ep, result.loss.item(), result.accuracy))
    if checkpoint_path is not None:
        save_encoder(encoder, checkpoint_path)
    if log_path is not None:
        write_log(log_path, ("episode", "loss", "accuracy"), log)
    return encoder, log


def write_log(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def protonet_config_dict(config: ProtonetConfig) -> dict:
    return asdict(config)
