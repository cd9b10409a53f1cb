"""Layers and the residual convolutional encoder.

The encoder exposes two sites: the output of one residual block (the local
feature grid) and the global average of the last block (the representation).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    """Minimal parameter container; subclasses list children in ``_children``."""

    _children: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._children:
            child = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(child, Tensor):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_parameters(full + ".")
            else:
                for i, sub in enumerate(child):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def detached(self) -> "Module":
        """Shallow copy whose parameters are cut from the graph (values shared)."""
        clone = copy.copy(self)
        for name in self._children:
            child = getattr(self, name)
            if isinstance(child, Tensor):
                setattr(clone, name, Tensor(child.data))
            elif isinstance(child, Module):
                setattr(clone, name, child.detached())
            else:
                setattr(clone, name, [c.detached() for c in child])
        return clone

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape, gain: float = 6.0) -> np.ndarray:
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    _children = ("weight", "bias")

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, gain: float = 6.0):
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(_uniform(rng, fan_in, (out_ch, in_ch, kernel, kernel), gain), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    _children = ("weight", "bias")

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 6.0):
        self.weight = Tensor(_uniform(rng, in_dim, (in_dim, out_dim), gain), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Two-layer perceptron (one hidden ReLU layer); ``hidden=0`` gives a single linear map."""

    _children = ("layers",)

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        if hidden:
            self.layers = [Linear(in_dim, hidden, rng), Linear(hidden, out_dim, rng, gain=3.0)]
        else:
            self.layers = [Linear(in_dim, out_dim, rng, gain=3.0)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)


class ResidualBlock(Module):
    """Two 3x3 convolutions with a skip connection and a learned output scale.

    The scale replaces batch normalization so that the forward pass stays
    independent across samples.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1)
        self.scale = Tensor(np.array(1.0), requires_grad=True)
        self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride) if (stride != 1 or in_ch != out_ch) else None
        self._children = ("conv1", "conv2", "scale") + (("proj",) if self.proj is not None else ())

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(T.relu(self.conv1(x)))
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(skip + self.scale * h)


@dataclass
class EncoderConfig:
    """Shape of the encoder.

    The stem (stride-2 3x3 conv then 2x2 average pool) reduces the input by 4;
    every block after the first halves the resolution again.
    """

    input_channels: int = 3
    input_size: int = 32
    stem_channels: int = 16
    block_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    tap_index: int = 0
    repr_dim: int = 64

    def validate(self) -> "EncoderConfig":
        if not self.block_channels:
            raise ConfigError("encoder needs at least one block")
        if not 0 <= self.tap_index < len(self.block_channels):
            raise ConfigError(f"tap_index {self.tap_index} outside [0, {len(self.block_channels)})")
        if self.repr_dim != self.block_channels[-1]:
            raise ConfigError(f"repr_dim {self.repr_dim} must equal last block channels {self.block_channels[-1]}")
        if min(self.input_channels, self.stem_channels, *self.block_channels) < 1:
            raise ConfigError("channel counts must be positive")
        factor = 4 * 2 ** (len(self.block_channels) - 1)
        if self.input_size < factor or self.input_size % factor:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of {factor}")
        return self

    @property
    def tap_size(self) -> int:
        return self.input_size // (4 * 2 ** self.tap_index)

    @property
    def tap_channels(self) -> int:
        return self.block_channels[self.tap_index]

    @property
    def n_local(self) -> int:
        return self.tap_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{**d, "block_channels": list(d["block_channels"])})


class EncoderOutput(NamedTuple):
    local_features: Tensor  # B x C_tap x h x w
    representation: Tensor  # B x repr_dim


class Encoder(Module):
    """Residual CNN with a local-feature tap and a pooled representation."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        self.stem = Conv2d(config.input_channels, config.stem_channels, 3, rng, stride=2, padding=1)
        blocks = []
        in_ch = config.stem_channels
        for i, out_ch in enumerate(config.block_channels):
            blocks.append(ResidualBlock(in_ch, out_ch, 1 if i == 0 else 2, rng))
            in_ch = out_ch
        self.blocks = blocks
        self._children = ("stem", "blocks")
        self.frozen = False

    def _check_images(self, images: Tensor) -> None:
        c = self.config
        expected = (c.input_channels, c.input_size, c.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"encoder expects B x {expected}, got {images.shape}")

    def to_tap(self, images: Tensor) -> Tensor:
        """Stem and blocks up to and including the tap block."""
        images = T._wrap(images)
        self._check_images(images)
        x = T.avgpool2d(T.relu(self.stem(images)), 2)
        for block in self.blocks[: self.config.tap_index + 1]:
            x = block(x)
        return x

    def from_tap(self, local_features: Tensor) -> Tensor:
        """Remaining blocks and global average pooling."""
        x = T._wrap(local_features)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.tap_channels, c.tap_size, c.tap_size):
            raise DimensionError(f"tap features must be B x {c.tap_channels} x {c.tap_size} x {c.tap_size}, got {x.shape}")
        for block in self.blocks[c.tap_index + 1:]:
            x = block(x)
        return T.mean(x, axis=(2, 3))

    def final_features(self, images: Tensor) -> Tensor:
        x = self.to_tap(images)
        for block in self.blocks[self.config.tap_index + 1:]:
            x = block(x)
        return x

    def __call__(self, images: Tensor) -> EncoderOutput:
        local = self.to_tap(images)
        return EncoderOutput(local, self.from_tap(local))


def build_encoder(config: EncoderConfig, seed: int = 0) -> Encoder:
    return Encoder(config, seed)


def encoder_forward(encoder: Encoder, images) -> EncoderOutput:
    return encoder(T._wrap(images))


def freeze(encoder: Encoder) -> Encoder:
    """Frozen copy of ``encoder``: parameters no longer require gradients."""
    frozen = copy.deepcopy(encoder)
    frozen.set_trainable(False)
    frozen.frozen = True
    return frozen
