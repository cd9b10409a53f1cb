import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from milr.errors import ConfigError, ContractError, DimensionError
from milr.viz import (
    InfoMap,
    blend,
    colorize,
    heat_image,
    image_to_uint8,
    normalize_map,
    render_sample,
    upsample_bilinear,
    write_maps_csv,
    write_png,
)

grids = arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 6)), elements=st.floats(-100, 100))


def test_infomap_validation():
    with pytest.raises(ContractError):
        InfoMap(np.zeros((2, 2)), "mutual", 0)
    with pytest.raises(ContractError):
        InfoMap(np.array([[np.inf, 0.0]]), "total", 0)
    with pytest.raises(DimensionError):
        InfoMap(np.zeros(3), "total", 0)


def test_normalize_examples():
    assert np.array_equal(normalize_map(np.full((3, 3), 7.0)), np.zeros((3, 3)))
    assert np.array_equal(normalize_map(np.array([[0.0, 1.0, 2.0]])), [[0.0, 0.5, 1.0]])


@given(grids)
def test_normalize_extremes_exact(g):
    n = normalize_map(g)
    if g.max() > g.min():
        assert n.min() == 0.0 and n.max() == 1.0
        assert n[g == g.max()].min() == 1.0


def test_upsample_constant_and_single_cell():
    assert np.array_equal(upsample_bilinear(np.full((3, 3), 2.5), 12, 12), np.full((12, 12), 2.5))
    assert np.array_equal(upsample_bilinear(np.array([[4.0]]), 5, 7), np.full((5, 7), 4.0))


def test_upsample_hand_computed():
    # align_corners=False: output column centres map to source x = (j + 0.5) / 2 - 0.5
    # -> -0.25, 0.25, 0.75, 1.25, clamped to [0, 1] -> 0, 0.25, 0.75, 1
    out = upsample_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 4, 4)
    assert np.array_equal(out, np.tile([0.0, 0.25, 0.75, 1.0], (4, 1)))


def test_upsample_smaller_target():
    with pytest.raises(DimensionError):
        upsample_bilinear(np.zeros((4, 4)), 3, 8)


@settings(max_examples=50)
@given(grids, st.integers(0, 3), st.integers(0, 9))
def test_upsample_stays_within_source_range(g, factor, extra):
    h, w = g.shape
    up = upsample_bilinear(g, h * (factor + 1) + extra, w * (factor + 1))
    assert up.min() >= g.min() - 1e-12 and up.max() <= g.max() + 1e-12


@settings(max_examples=50)
@given(grids, st.sampled_from([1, 3, 5]))
def test_upsample_odd_factor_preserves_extremes(g, factor):
    h, w = g.shape
    up = upsample_bilinear(g, h * factor, w * factor)
    assert abs(up.min() - g.min()) < 1e-12 and abs(up.max() - g.max()) < 1e-12


def test_upsample_even_factor_attenuates_interior_peak():
    assert upsample_bilinear(np.array([[0.0, 1.0, 0.0]] * 2), 2, 6).max() == 0.75


def test_colorize_control_points():
    px = colorize(np.array([[0.0, 0.5, 1.0, 0.25]]))
    assert px.dtype == np.uint8
    assert px[0].tolist() == [[0, 0, 255], [0, 255, 0], [255, 0, 0], [0, 128, 128]]


def test_colorize_rejects_out_of_range():
    for bad in (-0.01, 1.01, np.nan):
        with pytest.raises(ContractError):
            colorize(np.array([[bad]]))


def test_blend_identities_and_average():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 256, (4, 5, 3), dtype=np.uint8)
    b = rng.integers(0, 256, (4, 5, 3), dtype=np.uint8)
    assert np.array_equal(blend(a, b, 0.0).pixels, a)
    assert np.array_equal(blend(a, b, 1.0).pixels, b)
    half = blend(np.array([[[10, 0, 255]]], np.uint8), np.array([[[21, 255, 0]]], np.uint8), 0.5)
    assert half.pixels[0, 0].tolist() == [16, 128, 128]  # 15.5, 127.5, 127.5 rounded away from zero
    assert half.blend == 0.5


def test_blend_errors():
    a = np.zeros((2, 2, 3), np.uint8)
    with pytest.raises(ConfigError):
        blend(a, a, 1.5)
    with pytest.raises(DimensionError):
        blend(a, np.zeros((2, 3, 3), np.uint8), 0.5)


@settings(max_examples=40)
@given(st.integers(0, 255), st.integers(0, 255), st.floats(0, 1), st.floats(0, 1))
def test_blend_monotone_in_lambda(x, y, l1, l2):
    lo, hi = sorted((l1, l2))
    a, b = np.full((1, 1, 3), x, np.uint8), np.full((1, 1, 3), y, np.uint8)
    p_lo, p_hi = int(blend(a, b, lo).pixels[0, 0, 0]), int(blend(a, b, hi).pixels[0, 0, 0])
    assert (p_hi - p_lo) * np.sign(y - x) >= 0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(-5, 5)), st.floats(0.01, 100), st.floats(-50, 50))
def test_heat_image_affine_invariance(g, a, b):
    assume(np.ptp(g) > 1e-3)  # a spread below float resolution of a*g + b is no longer a map
    base = heat_image(InfoMap(g, "total", 0), 32, 32)
    assert np.array_equal(heat_image(InfoMap(a * g + b, "total", 0), 32, 32), base)


def test_redundant_maps_are_clamped():
    v = np.array([[-3.0, 0.0], [1.0, 2.0]])
    clamped = heat_image(InfoMap(v, "redundant", 0), 4, 4)
    assert np.array_equal(clamped, heat_image(InfoMap(np.maximum(v, 0), "total", 0), 4, 4))


def test_png_roundtrip_and_stable_bytes(tmp_path):
    px = np.random.default_rng(1).integers(0, 256, (6, 7, 3), dtype=np.uint8)
    a, b = write_png(px, tmp_path / "a.png"), write_png(px, tmp_path / "b.png")
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(np.asarray(Image.open(a)), px)
    with pytest.raises(ContractError):
        write_png(px.astype(np.float64), tmp_path / "c.png")
    with pytest.raises(OSError):
        write_png(px, tmp_path / "missing" / "d.png")


def test_render_sample_writes_five_images(tmp_path):
    rng = np.random.default_rng(2)
    maps = {k: InfoMap(rng.standard_normal((8, 8)), k, 3) for k in ("total", "decision", "redundant")}
    paths = render_sample(rng.uniform(0, 1, (3, 32, 32)), maps, tmp_path / "3")
    assert sorted(p.name for p in paths) == sorted(
        f"{n}.png" for n in ("original", "total_heat", "total_mix", "decision_mix", "redundant_mix"))
    assert all(np.asarray(Image.open(p)).shape == (32, 32, 3) for p in paths)


def test_image_to_uint8():
    img = np.zeros((3, 2, 2))
    img[0] = 1.0
    img[1] = 0.5
    assert image_to_uint8(img)[0, 0].tolist() == [255, 128, 0]


def test_maps_csv_keeps_raw_values(tmp_path):
    m = InfoMap(np.array([[-0.25, 1.0 / 3.0]]), "redundant", 12)
    lines = write_maps_csv(tmp_path / "maps.csv", [m]).read_text().splitlines()
    assert lines[0] == "sample_id,kind,row,col,value"
    assert lines[1] == "12,redundant,0,0,-0.25"
    assert float(lines[2].split(",")[-1]) == 1.0 / 3.0
