"""Heat maps and blended overlays for per-location information maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

KINDS = ("total", "decision", "redundant")

# blue -> green -> red
_CONTROL_X = np.array([0.0, 0.5, 1.0])
_CONTROL_RGB = np.array([[0.0, 0.0, 255.0], [0.0, 255.0, 0.0], [255.0, 0.0, 0.0]])


@dataclass
class InfoMap:
    """Estimated information (nats) at each position of the tap grid for one sample."""

    values: np.ndarray  # h x w
    kind: str
    sample_id: int | str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in KINDS:
            raise ContractError(f"unknown map kind {self.kind!r}")
        if self.values.ndim != 2:
            raise DimensionError(f"info map must be 2-d, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("info map has non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def clamped(self) -> "InfoMap":
        return InfoMap(np.maximum(self.values, 0.0), self.kind, self.sample_id)


@dataclass
class RenderedImage:
    pixels: np.ndarray  # H x W x 3 uint8
    sample_id: int | str = ""
    kind: str = ""
    blend: float | None = None


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def normalize_map(values) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant map becomes all zeros."""
    v = values.values if isinstance(values, InfoMap) else np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    out = (v - lo) / (hi - lo)
    # pin the extremes exactly despite rounding in the division
    out[v == lo] = 0.0
    out[v == hi] = 1.0
    return out


def upsample_bilinear(grid, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False), edges clamped."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    if height < h or width < w:
        raise DimensionError(f"target {height}x{width} smaller than source {h}x{w}")

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, wr = axis_weights(height, h)
    c0, c1, wc = axis_weights(width, w)
    top = grid[r0][:, c0] * (1 - wc) + grid[r0][:, c1] * wc
    bottom = grid[r1][:, c0] * (1 - wc) + grid[r1][:, c1] * wc
    return top * (1 - wr)[:, None] + bottom * wr[:, None]


def colorize(grid) -> np.ndarray:
    """Map values in [0, 1] to 8-bit RGB along blue -> green -> red."""
    g = np.asarray(grid, dtype=np.float64)
    if np.any(~np.isfinite(g)) or g.min() < 0 or g.max() > 1:
        raise ContractError("colorize expects values in [0, 1]")
    rgb = np.stack([np.interp(g, _CONTROL_X, _CONTROL_RGB[:, ch]) for ch in range(3)], axis=-1)
    return _round_half_away(rgb).astype(np.uint8)


def blend(original, heat, lam: float = 0.5, sample_id="", kind="") -> RenderedImage:
    """``round((1 - lam) * original + lam * heat)`` per channel."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"blend weight must be in [0, 1], got {lam}")
    original = np.asarray(original)
    heat = np.asarray(heat)
    if original.shape != heat.shape:
        raise DimensionError(f"blend shapes differ: {original.shape} vs {heat.shape}")
    mixed = (1.0 - lam) * original.astype(np.float64) + lam * heat.astype(np.float64)
    return RenderedImage(np.clip(_round_half_away(mixed), 0, 255).astype(np.uint8), sample_id, kind, lam)


def image_to_uint8(image) -> np.ndarray:
    """``C x H x W`` float image in [0, 1] -> ``H x W x 3`` uint8."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return _round_half_away(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def heat_image(info: InfoMap, height: int, width: int) -> np.ndarray:
    """Normalize, upsample and colorize a map (redundancy maps are clamped at 0 first)."""
    values = info.clamped().values if info.kind == "redundant" else info.values
    up = upsample_bilinear(values, height, width)
    # snap to a 1e-9 lattice so an affine rescale of the map cannot flip a rounding
    return colorize(np.round(normalize_map(up), 9))


def write_png(image, path) -> Path:
    from PIL import Image

    pixels = image.pixels if isinstance(image, RenderedImage) else np.asarray(image)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ContractError("write_png expects an H x W x 3 uint8 image")
    path = Path(path)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    return path


def render_sample(image, maps: dict[str, InfoMap], out_dir, lam: float = 0.5) -> list[Path]:
    """Write the five per-sample images; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    original = image_to_uint8(image)
    H, W = original.shape[:2]
    heats = {k: heat_image(m, H, W) for k, m in maps.items()}
    files = {
        "original": original,
        "total_heat": heats["total"],
        "total_mix": blend(original, heats["total"], lam).pixels,
        "decision_mix": blend(original, heats["decision"], lam).pixels,
        "redundant_mix": blend(original, heats["redundant"], lam).pixels,
    }
    return [write_png(px, out_dir / f"{name}.png") for name, px in files.items()]


def write_maps_csv(path, maps: list[InfoMap]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "kind", "row", "col", "value"])
        for m in maps:
            for (r, c), v in np.ndenumerate(m.values):
                w.writerow([m.sample_id, m.kind, r, c, repr(float(v))])
    return path
