"""Compiled-loop and numpy kernels must agree."""

import subprocess
import sys

import numpy as np
import pytest

from tumorbed import _accel, kernels
from tumorbed.imaging import HsvBounds

IMPL = kernels.IMPLEMENTATIONS


def test_backend_reports_flag():
    assert _accel.backend() in ("numba", "numpy")
    assert _accel.backend() == ("numba" if _accel.USE_NUMBA else "numpy")


@pytest.mark.parametrize("value,expected", [("1", "numpy"), ("true", "numpy"), ("0", None), ("", None)])
def test_env_flag_selects_numpy(value, expected):
    code = "import tumorbed._accel as a, tumorbed.kernels as k; print(a.backend(), k.hsv_band_mask is k.hsv_band_mask_numba)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"TUMORBED_DISABLE_NUMBA": value, "PATH": "/usr/bin:/bin"},
        capture_output=True,
        text=True,
        check=True,
    ).stdout.split()
    if expected == "numpy":
        assert out == ["numpy", "False"]
    else:
        assert out[0] == ("numba" if _accel.HAVE_NUMBA else "numpy")


def test_hsv_band_mask_parity():
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(64, 80, 3), dtype=np.uint8)
    b = HsvBounds().as_array()
    loops, vec = IMPL["hsv_band_mask"]
    assert np.array_equal(loops(rgb, b), vec(rgb, b))


def test_hsv_band_mask_exhaustive_hue_ring():
    # every colour on the 8-bit cube surface where one channel is 255 or 0
    g = np.arange(256, dtype=np.uint8)
    r, gg = np.meshgrid(g, g)
    rgb = np.stack([r, gg, np.full_like(r, 200)], axis=-1)
    b = HsvBounds().as_array()
    loops, vec = IMPL["hsv_band_mask"]
    assert np.array_equal(loops(rgb, b), vec(rgb, b))


def _votes(fn, xs, ys, sides, probs, cs, shape):
    s = np.zeros(shape)
    c = np.zeros(shape, dtype=np.int64)
    fn(xs, ys, sides, probs, float(cs), s, c)
    return s, c


def test_accumulate_votes_parity():
    rng = np.random.default_rng(1)
    n = 300
    xs = rng.integers(0, 30, n).astype(np.float64) * 64
    ys = rng.integers(0, 20, n).astype(np.float64) * 64
    sides = np.full(n, 256.0)
    probs = rng.random(n)
    loops, vec = IMPL["accumulate_votes"]
    a = _votes(loops, xs, ys, sides, probs, 64, (24, 34))
    b = _votes(vec, xs, ys, sides, probs, 64, (24, 34))
    assert np.array_equal(a[1], b[1])
    np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-12)


def test_accumulate_votes_clamped_tile():
    # a tile at a non-multiple offset covers cells whose centres it contains
    loops, vec = IMPL["accumulate_votes"]
    for fn in (loops, vec):
        s, c = _votes(fn, np.array([100.0]), np.array([0.0]), np.array([256.0]), np.array([1.0]), 128, (3, 4))
        # centres at 64, 192, 320, 448 -> 192 and 320 are inside [100, 356)
        assert c[0].tolist() == [0, 1, 1, 0]
        assert c[1].tolist() == [0, 1, 1, 0]
        assert c[2].tolist() == [0, 0, 0, 0]


def test_points_in_polygon_parity():
    rng = np.random.default_rng(2)
    t = np.sort(rng.uniform(0, 2 * np.pi, 9))
    vx = 50 + 40 * np.cos(t)
    vy = 50 + 30 * np.sin(t)
    px = rng.uniform(0, 100, 5000)
    py = rng.uniform(0, 100, 5000)
    loops, vec = IMPL["points_in_polygon"]
    assert np.array_equal(loops(px, py, vx, vy), vec(px, py, vx, vy))


def test_assign_nearest_parity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5000, 16))
    c = rng.normal(size=(37, 16))
    loops, vec = IMPL["assign_nearest"]
    la, da = loops(x, c)
    lb, db = vec(x, c)
    np.testing.assert_allclose(da, db, rtol=1e-9, atol=1e-9)
    # labels may differ only on numerical near-ties
    diff = la != lb
    if diff.any():
        d2 = ((x[diff, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(diff.sum())
        assert np.allclose(d2[rows, la[diff]], d2[rows, lb[diff]], rtol=1e-9)


def test_assign_nearest_matches_brute_force():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(400, 5))
    c = rng.normal(size=(9, 5))
    ref = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    labels, dist = kernels.assign_nearest(x, c)
    assert np.array_equal(labels, ref.argmin(axis=1))
    np.testing.assert_allclose(dist, ref.min(axis=1), atol=1e-9)


def test_streaming_update_parity_and_running_mean():
    rng = np.random.default_rng(5)
    batch = rng.normal(size=(500, 8))
    labels = rng.integers(0, 6, 500)
    start = rng.normal(size=(6, 8))
    counts0 = rng.integers(0, 4, 6)
    loops, vec = IMPL["streaming_update"]
    ca, na = start.copy(), counts0.astype(np.int64).copy()
    cb, nb = start.copy(), counts0.astype(np.int64).copy()
    loops(batch, labels, ca, na)
    vec(batch, labels, cb, nb)
    assert np.array_equal(na, nb)
    np.testing.assert_allclose(ca, cb, rtol=1e-10, atol=1e-12)
    # a centre with zero prior count ends at the plain mean of its points
    fresh = np.flatnonzero(counts0 == 0)
    for k in fresh:
        if (labels == k).any():
            np.testing.assert_allclose(ca[k], batch[labels == k].mean(axis=0), atol=1e-12)
