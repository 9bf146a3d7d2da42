"""Backend pairing: the numba kernels must match the pure-numpy fallbacks
exactly, including float64 bit patterns for the convolution."""

import os
import subprocess
import sys

import numpy as np
import pytest

from layoutfuse.kernels import _numba as knb
from layoutfuse.kernels import _numpy as knp


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(99)


def test_rle_encode_decode_equivalent(rng):
    for _ in range(100):
        h = int(rng.integers(1, 64))
        w = int(rng.integers(1, 64))
        flat = (rng.random(h * w) < rng.random()).ravel()
        a = knp.rle_encode(flat)
        b = knb.rle_encode(flat)
        assert (a == b).all()
        assert (knp.rle_decode(a, flat.size) == knb.rle_decode(a, flat.size)).all()
        assert (knp.rle_decode(a, flat.size) == flat).all()


def test_rle_overlap_equivalent(rng):
    for _ in range(100):
        n = int(rng.integers(1, 2000))
        fa = rng.random(n) < rng.random()
        fb = rng.random(n) < rng.random()
        ca, cb = knp.rle_encode(fa), knp.rle_encode(fb)
        want = int((fa & fb).sum())
        assert knp.rle_overlap(ca, cb) == want
        assert knb.rle_overlap(ca, cb) == want


def test_rle_paint_equivalent(rng):
    for _ in range(50):
        n = int(rng.integers(1, 1500))
        flat = rng.random(n) < 0.3
        counts = knp.rle_encode(flat)
        buf_a = np.zeros(n, dtype=np.bool_)
        buf_b = np.zeros(n, dtype=np.bool_)
        knp.rle_paint(buf_a, counts)
        knb.rle_paint(buf_b, counts)
        assert (buf_a == flat).all()
        assert (buf_b == flat).all()


def test_fill_polygon_equivalent(rng):
    for _ in range(300):
        n = int(rng.integers(3, 10))
        xs = rng.uniform(-6, 40, n)
        ys = rng.uniform(-6, 40, n)
        h = int(rng.integers(1, 36))
        w = int(rng.integers(1, 36))
        assert (knp.fill_polygon(xs, ys, h, w) == knb.fill_polygon(xs, ys, h, w)).all()


def test_morphology_equivalent(rng):
    for _ in range(40):
        h = int(rng.integers(1, 50))
        w = int(rng.integers(1, 50))
        img = rng.integers(0, 256, (h, w)).astype(np.uint8)
        r = int(rng.integers(1, 4))
        assert (knp.grey_erode(img, r) == knb.grey_erode(img, r)).all()
        assert (knp.grey_dilate(img, r) == knb.grey_dilate(img, r)).all()


def test_convolve_bit_identical(rng):
    for _ in range(40):
        h = int(rng.integers(1, 64))
        w = int(rng.integers(1, 64))
        img = rng.random((h, w)) * 255
        sigma = float(rng.uniform(0.3, 3.0))
        radius = int(np.ceil(3 * sigma))
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-0.5 * (x / sigma) ** 2)
        kernel /= kernel.sum()
        a = knp.convolve_separable(img, kernel)
        b = knb.convolve_separable(img, kernel)
        assert (a == b).all()


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, LAYOUTFUSE_BACKEND="numpy")
    out = subprocess.run(
        [sys.executable, "-c", "from layoutfuse import kernels; print(kernels.BACKEND)"],
        capture_output=True,
        text=True,
        env=env,
        check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_backend():
    env = dict(os.environ, LAYOUTFUSE_BACKEND="gpu")
    out = subprocess.run(
        [sys.executable, "-c", "import layoutfuse.kernels"],
        capture_output=True,
        text=True,
        env=env,
    )
    assert out.returncode != 0
    assert "LAYOUTFUSE_BACKEND" in out.stderr
