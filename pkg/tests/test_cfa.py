import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from klap.cfa import (ALL_KINDS, B, G, R, CfaKind, RawImage, bin_array, cfa_color_at,
                      color_map, mosaic, pixel_bin, replicate_to_rgb, upsample_bilinear)
from klap.errors import BinningError, DimensionError


def tiling_oracle(kind, size=24):
    """Expand the 2x2 base tile by s x s blocks, then tile it."""
    base = np.array([[G, R], [B, G]])
    s = kind.unit_size
    tile = np.kron(base, np.ones((s, s), dtype=int))
    reps = -(-size // tile.shape[0])
    return np.tile(tile, (reps, reps))[:size, :size]


def test_kind_geometry():
    assert [k.unit_size for k in ALL_KINDS] == [1, 2, 3, 4]
    assert [k.period for k in ALL_KINDS] == [2, 4, 6, 8]
    assert CfaKind.parse("QxQ") is CfaKind.QXQ
    with pytest.raises(ValueError):
        CfaKind.parse("xtrans")


def test_color_at_examples():
    assert cfa_color_at(CfaKind.BAYER, 0, 1) == R
    assert cfa_color_at(CfaKind.QXQ, 3, 3) == G
    assert cfa_color_at(CfaKind.QUAD, 2, 0) == B


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_color_tables_match_tiling_oracle(kind):
    oracle = tiling_oracle(kind)
    table = np.array([[cfa_color_at(kind, r, c) for c in range(24)] for r in range(24)])
    np.testing.assert_array_equal(table, oracle)
    np.testing.assert_array_equal(color_map(kind, 24, 24), oracle)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_color_at_periodic(kind):
    p = kind.period
    for r in range(p):
        for c in range(p):
            for dr, dc in [(p, 0), (0, p), (3 * p, 5 * p)]:
                assert cfa_color_at(kind, r + dr, c + dc) == cfa_color_at(kind, r, c)


def test_mosaic_small_examples():
    gray = np.full((3, 24, 24), 0.5)
    for kind in ALL_KINDS:
        assert np.all(mosaic(gray, kind).data == 0.5)
    red = np.zeros((3, 2, 2))
    red[0] = 1.0
    np.testing.assert_array_equal(mosaic(red, CfaKind.BAYER).data, [[0, 1], [0, 0]])


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_mosaic_matches_pixel_oracle(kind):
    rgb = np.random.default_rng(3).random((3, 24, 24))
    raw = mosaic(rgb, kind)
    for r in range(24):
        for c in range(24):
            assert raw.data[r, c] == rgb[cfa_color_at(kind, r, c), r, c]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_remosaic_of_replicated_is_identity(kind):
    raw = RawImage(np.random.default_rng(0).random((24, 48)), kind)
    np.testing.assert_array_equal(mosaic(replicate_to_rgb(raw), kind).data, raw.data)


def test_mosaic_dimension_error():
    with pytest.raises(DimensionError):
        mosaic(np.zeros((3, 12, 12)), CfaKind.QXQ)


def test_bin_constant_and_sequence():
    raw = RawImage(np.full((16, 16), 0.3), CfaKind.QXQ)
    out = pixel_bin(raw, CfaKind.BAYER)
    assert out.shape == (4, 4) and out.kind is CfaKind.BAYER
    np.testing.assert_allclose(out.data, 0.3, rtol=0, atol=1e-15)
    unit = np.zeros((8, 8))
    unit[:4, :4] = np.arange(16).reshape(4, 4) / 15
    assert pixel_bin(RawImage(unit, CfaKind.QXQ), CfaKind.BAYER).data[0, 0] == pytest.approx(0.5)


def test_bin_is_single_color_per_block():
    rgb = np.random.default_rng(1).random((3, 48, 48))
    for src, dst in [(CfaKind.QXQ, CfaKind.QUAD), (CfaKind.QXQ, CfaKind.BAYER),
                     (CfaKind.QUAD, CfaKind.BAYER), (CfaKind.NONA, CfaKind.BAYER)]:
        f = src.unit_size // dst.unit_size
        cmap = color_map(src, 48, 48).reshape(48 // f, f, 48 // f, f)
        assert np.all(cmap.min(axis=(1, 3)) == cmap.max(axis=(1, 3)))
        binned = pixel_bin(mosaic(rgb, src), dst)
        np.testing.assert_array_equal(cmap[:, 0, :, 0], color_map(dst, 48 // f, 48 // f))
        assert binned.kind is dst


def test_bin_associativity():
    raw = RawImage(np.random.default_rng(2).random((48, 48)), CfaKind.QXQ)
    two = pixel_bin(pixel_bin(raw, CfaKind.QUAD), CfaKind.BAYER)
    one = pixel_bin(raw, CfaKind.BAYER)
    assert np.max(np.abs(two.data - one.data)) < 1e-12


def test_bin_preserves_block_means():
    data = np.random.default_rng(5).random((24, 24))
    out = bin_array(data, 3)
    for i in range(8):
        for j in range(8):
            assert abs(out[i, j] - data[3 * i:3 * i + 3, 3 * j:3 * j + 3].mean()) < 1e-12


def test_bin_errors():
    with pytest.raises(BinningError):
        pixel_bin(RawImage(np.zeros((8, 8)), CfaKind.BAYER), CfaKind.BAYER)
    with pytest.raises(BinningError):
        pixel_bin(RawImage(np.zeros((24, 24)), CfaKind.NONA), CfaKind.QUAD)
    with pytest.raises(BinningError):
        pixel_bin(RawImage(np.zeros((8, 8)), CfaKind.QUAD), CfaKind.QUAD)


def test_bin_noise_variance_reduction():
    rng = np.random.default_rng(11)
    noise = rng.normal(0.0, 0.1, (1000, 1000))
    for src, dst, f in [(CfaKind.QXQ, CfaKind.BAYER, 4), (CfaKind.QUAD, CfaKind.BAYER, 2)]:
        binned = pixel_bin(RawImage(noise, src), dst).data
        ratio = noise.var() / binned.var()
        assert abs(ratio / f**2 - 1) < 0.10


def test_upsample_examples():
    img = np.random.default_rng(0).random((3, 4, 6))
    np.testing.assert_array_equal(upsample_bilinear(img, 1), img)
    np.testing.assert_allclose(upsample_bilinear(np.full((3, 5, 5), 0.7), 3), 0.7)
    src = np.tile(np.array([[0.0, 1.0], [0.0, 1.0]]), (3, 1, 1))
    out = upsample_bilinear(src, 2)
    # sample positions -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1
    expected_row = [0.0, 0.25, 0.75, 1.0]
    assert out.shape == (3, 4, 4)
    for ch in range(3):
        for row in out[ch]:
            np.testing.assert_allclose(row, expected_row)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10**6))
def test_upsample_stays_within_input_range(h, w, f, seed):
    img = np.random.default_rng(seed).random((1, h, w))
    out = upsample_bilinear(img, f)
    assert out.shape == (1, h * f, w * f)
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12
