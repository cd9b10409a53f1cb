"""Synthetic glyph images with ground-truth masks, episode sampling, and I/O.

Every image holds two 8x8 patches on a noise background: a class glyph
(shape and colour fixed per class) and a checkerboard distractor that is
identical for all classes. The glyph box is the relevance mask, the
distractor box the distractor mask.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, GenerationError, IngestionError, SamplingError

SHAPES = ("square", "cross", "triangle", "ring", "stripe")
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.10],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
])
MAX_CLASSES = len(SHAPES) * len(PALETTE)


def shape_template(shape: str, size: int = 8) -> np.ndarray:
    """Boolean ``size x size`` stencil for one of :data:`SHAPES`."""
    r, c = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2
    if shape == "square":
        lo, hi = size // 8, size - 1 - size // 8
        out = (r >= lo) & (r <= hi) & (c >= lo) & (c <= hi)
    elif shape == "cross":
        band = max(1, size // 4)
        lo = (size - band) // 2
        out = ((r >= lo) & (r < lo + band)) | ((c >= lo) & (c < lo + band))
    elif shape == "triangle":
        out = np.abs(c - mid) <= (r + 0.5) / 2
    elif shape == "ring":
        d = np.hypot(r - mid, c - mid)
        out = (d >= size * 0.22) & (d <= size * 0.5)
    elif shape == "stripe":
        out = (r % 4 == 1) | (r % 4 == 2)
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return out


def class_code(label: int) -> tuple[int, int]:
    """(shape index, colour index) for a class; distinct for labels < MAX_CLASSES."""
    s = label % len(SHAPES)
    return s, (s + label // len(SHAPES)) % len(PALETTE)


def glyph_patch(label: int, size: int = 8) -> np.ndarray:
    """3 x size x size glyph: class colour on the stencil, black elsewhere."""
    s, col = class_code(label)
    stencil = shape_template(SHAPES[s], size)
    return stencil[None].astype(float) * PALETTE[col][:, None, None]


def distractor_patch(size: int = 8) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size]
    board = ((r // 2 + c // 2) % 2).astype(float)
    return np.repeat(board[None], 3, axis=0)


def decode_glyph(image: np.ndarray, relevance_mask: np.ndarray) -> int:
    """Recover the class of a synthetic image from the pixels under its relevance mask."""
    rows, cols = np.nonzero(relevance_mask)
    if rows.size == 0:
        raise ValueError("empty relevance mask")
    size = rows.max() - rows.min() + 1
    box = image[:, rows.min():rows.min() + size, cols.min():cols.min() + size]
    for label in range(MAX_CLASSES):
        if np.allclose(box, glyph_patch(label, size)):
            return label
    raise ValueError("no glyph matches the masked region")


@dataclass
class SyntheticSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    label: int
    relevance_mask: np.ndarray | None  # H x W bool
    distractor_mask: np.ndarray | None


@dataclass
class Dataset:
    """Images with labels and, for synthetic data, the two region masks."""

    images: np.ndarray  # n x 3 x H x W float64
    labels: np.ndarray  # n int64
    relevance_masks: np.ndarray | None = None  # n x H x W bool
    distractor_masks: np.ndarray | None = None
    class_names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        rel = None if self.relevance_masks is None else self.relevance_masks[i]
        dis = None if self.distractor_masks is None else self.distractor_masks[i]
        return SyntheticSample(self.images[i], int(self.labels[i]), rel, dis)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def indices_by_class(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}


def _place_disjoint(rng: np.random.Generator, image_size: int, patch: int, attempts: int = 1000):
    span = image_size - patch + 1
    for _ in range(attempts):
        gy, gx, dy, dx = rng.integers(0, span, size=4)
        if abs(int(gy) - int(dy)) >= patch or abs(int(gx) - int(dx)) >= patch:
            return (int(gy), int(gx)), (int(dy), int(dx))
    raise GenerationError(f"could not place two disjoint {patch}x{patch} patches in {image_size}x{image_size}")


def generate_dataset(n_classes: int = 10, samples_per_class: int = 40, image_size: int = 32,
                     noise_level: float = 0.5, seed: int = 0, patch_size: int = 8) -> Dataset:
    """Generate the synthetic glyph dataset.

    Background pixels are ``0.5 + noise_level * (u - 0.5)`` with ``u`` uniform
    on [0, 1), drawn independently per pixel and channel.
    """
    if not 5 <= n_classes <= MAX_CLASSES:
        raise ConfigError(f"n_classes must be in [5, {MAX_CLASSES}], got {n_classes}")
    if image_size < 16:
        raise ConfigError(f"image_size must be >= 16, got {image_size}")
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be positive")
    if not 0 <= noise_level <= 1:
        raise ConfigError(f"noise_level must be in [0, 1], got {noise_level}")
    if 2 * patch_size > image_size:
        raise GenerationError(f"two {patch_size}px patches cannot fit disjointly in {image_size}px")
    rng = np.random.default_rng(seed)
    n = n_classes * samples_per_class
    images = np.empty((n, 3, image_size, image_size))
    rel = np.zeros((n, image_size, image_size), dtype=bool)
    dis = np.zeros_like(rel)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    board = distractor_patch(patch_size)
    glyphs = [glyph_patch(c, patch_size) for c in range(n_classes)]
    for i, label in enumerate(labels):
        img = 0.5 + noise_level * (rng.random((3, image_size, image_size)) - 0.5)
        (gy, gx), (dy, dx) = _place_disjoint(rng, image_size, patch_size)
        img[:, gy:gy + patch_size, gx:gx + patch_size] = glyphs[label]
        img[:, dy:dy + patch_size, dx:dx + patch_size] = board
        rel[i, gy:gy + patch_size, gx:gx + patch_size] = True
        dis[i, dy:dy + patch_size, dx:dx + patch_size] = True
        images[i] = img
    names = [f"{SHAPES[class_code(c)[0]]}-{class_code(c)[1]}" for c in range(n_classes)]
    return Dataset(images, labels.astype(np.int64), rel, dis, names)


class Episode(NamedTuple):
    support_images: np.ndarray  # (n_way * k_shot) x C x H x W, grouped by class
    support_labels: np.ndarray
    query_images: np.ndarray    # (n_way * n_query) x C x H x W
    query_labels: np.ndarray
    support_ids: np.ndarray     # dataset indices
    query_ids: np.ndarray

    @property
    def n_way(self) -> int:
        return len(np.unique(self.support_labels))

    @property
    def sample_ids(self) -> np.ndarray:
        return np.concatenate([self.support_ids, self.query_ids])


def sample_episode(dataset: Dataset, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw ``n_way`` classes without replacement, then disjoint support/query sets."""
    by_class = dataset.indices_by_class()
    eligible = sorted(c for c, idx in by_class.items() if len(idx) >= k_shot + n_query)
    if n_way < 1 or k_shot < 1 or n_query < 0:
        raise SamplingError("n_way and k_shot must be positive, n_query non-negative")
    if len(eligible) < n_way:
        raise SamplingError(f"need {n_way} classes with >= {k_shot + n_query} samples, have {len(eligible)}")
    classes = rng.choice(np.array(eligible), size=n_way, replace=False)
    support, query = [], []
    for c in classes:
        picked = rng.permutation(by_class[int(c)])[: k_shot + n_query]
        support.append(picked[:k_shot])
        query.append(picked[k_shot:])
    s_ids = np.concatenate(support)
    q_ids = np.concatenate(query) if n_query else np.empty(0, dtype=np.int64)
    return Episode(dataset.images[s_ids], dataset.labels[s_ids],
                   dataset.images[q_ids], dataset.labels[q_ids], s_ids, q_ids)


# -- persistence ----------------------------------------------------------------

DATASET_MAGIC = b"MILRDATA"
DATASET_VERSION = 1


def save_dataset(dataset: Dataset, path) -> Path:
    """Single-file little-endian layout: header, images, labels, masks, class names."""
    n, c, h, w = dataset.images.shape
    has_masks = dataset.relevance_masks is not None
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IIIIIB", DATASET_VERSION, n, c, h, w, int(has_masks)))
    buf.write(dataset.images.astype("<f8").tobytes())
    buf.write(dataset.labels.astype("<i8").tobytes())
    if has_masks:
        buf.write(dataset.relevance_masks.astype(np.uint8).tobytes())
        buf.write(dataset.distractor_masks.astype(np.uint8).tobytes())
    names = "\n".join(dataset.class_names or []).encode("utf-8")
    buf.write(struct.pack("<I", len(names)))
    buf.write(names)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    header = struct.calcsize("<IIIIIB")
    if raw[:8] != DATASET_MAGIC or len(raw) < 8 + header:
        raise FormatError(f"{path}: not a dataset file")
    version, n, c, h, w, has_masks = struct.unpack_from("<IIIIIB", raw, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    off = 8 + header
    count = n * c * h * w
    if len(raw) < off + 8 * (count + n) + (2 * n * h * w if has_masks else 0) + 4:
        raise FormatError(f"{path}: file truncated")
    images = np.frombuffer(raw, "<f8", count, off).reshape(n, c, h, w).astype(np.float64)
    off += 8 * count
    labels = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    rel = dis = None
    if has_masks:
        rel = np.frombuffer(raw, np.uint8, n * h * w, off).reshape(n, h, w).astype(bool)
        off += n * h * w
        dis = np.frombuffer(raw, np.uint8, n * h * w, off).reshape(n, h, w).astype(bool)
        off += n * h * w
    (name_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    names = raw[off:off + name_len].decode("utf-8").split("\n") if name_len else None
    if off + name_len != len(raw):
        raise FormatError(f"{path}: size does not match header")
    return Dataset(images, labels, rel, dis, names)


def load_image_folder(path, image_size: int = 32) -> Dataset:
    """Read ``path/<class_name>/<image>.png`` into a dataset resized to ``image_size``."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise IngestionError(f"{root}: no class directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.is_file())
        if not files:
            raise IngestionError(f"{d}: empty class directory")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise IngestionError(f"{f}: cannot decode image ({exc})") from None
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), None, None,
                   [d.name for d in class_dirs])
