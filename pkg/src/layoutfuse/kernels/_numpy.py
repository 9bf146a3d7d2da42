"""Pure-numpy reference implementations of the hot kernels.

Every function here must produce results identical to its counterpart in
``_numba``; the test suite enforces this pairing on random inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def rle_encode(flat: np.ndarray) -> np.ndarray:
    """Run-length counts of a flat boolean array, zero-run first."""
    flat = np.ascontiguousarray(flat, dtype=np.bool_)
    changes = np.nonzero(np.diff(flat.view(np.int8)))[0]
    bounds = np.concatenate(([0], changes + 1, [flat.size]))
    counts = np.diff(bounds).astype(np.int64)
    if flat[0]:
        counts = np.concatenate(([0], counts))
    return counts


def rle_decode(counts: np.ndarray, size: int) -> np.ndarray:
    """Inverse of :func:`rle_encode`; caller guarantees sum(counts) == size."""
    values = (np.arange(counts.size) % 2).astype(np.bool_)
    out = np.repeat(values, counts)
    return out


def rle_overlap(a: np.ndarray, b: np.ndarray) -> int:
    """Number of positions set in both run-length encoded sequences.

    Fallback path: decodes to dense bitmaps and counts the AND.
    """
    n = int(a.sum())
    fa = rle_decode(a, n)
    fb = rle_decode(b, n)
    return int(np.count_nonzero(fa & fb))


def rle_paint(buf: np.ndarray, counts: np.ndarray) -> None:
    """Set the one-runs of ``counts`` to True in the flat buffer ``buf``."""
    buf |= rle_decode(counts, buf.size)


def fill_polygon(xs: np.ndarray, ys: np.ndarray, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers (col + 0.5, row + 0.5)."""
    out = np.zeros((height, width), dtype=np.bool_)
    x2 = np.roll(xs, -1)
    y2 = np.roll(ys, -1)
    r_lo = max(0, int(np.floor(ys.min() - 0.5)))
    r_hi = min(height, int(np.ceil(ys.max() + 0.5)))
    for r in range(r_lo, r_hi):
        yc = r + 0.5
        crossing = (ys <= yc) != (y2 <= yc)
        if not crossing.any():
            continue
        cx = xs[crossing] + (yc - ys[crossing]) * (x2[crossing] - xs[crossing]) / (
            y2[crossing] - ys[crossing]
        )
        cx = np.sort(cx)
        for k in range(0, cx.size - 1, 2):
            c0 = int(np.ceil(cx[k] - 0.5))
            c1 = int(np.ceil(cx[k + 1] - 0.5))
            if c0 < 0:
                c0 = 0
            if c1 > width:
                c1 = width
            if c1 > c0:
                out[r, c0:c1] = True
    return out


def grey_erode(img: np.ndarray, radius: int) -> np.ndarray:
    p = np.pad(img, radius, mode="edge")
    w = sliding_window_view(p, (2 * radius + 1, 2 * radius + 1))
    return w.min(axis=(2, 3))


def grey_dilate(img: np.ndarray, radius: int) -> np.ndarray:
    p = np.pad(img, radius, mode="edge")
    w = sliding_window_view(p, (2 * radius + 1, 2 * radius + 1))
    return w.max(axis=(2, 3))


def convolve_separable(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D convolution with clamp-to-edge borders.

    Taps accumulate in index order so both backends produce bit-identical
    float64 results.
    """
    h, w = img.shape
    r = kernel.size // 2
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    tmp = np.zeros((h, w), dtype=np.float64)
    for k in range(kernel.size):
        tmp += kernel[k] * p[:, k : k + w]
    p = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for k in range(kernel.size):
        out += kernel[k] * p[k : k + h, :]
    return out
