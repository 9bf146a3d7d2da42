"""Numba-compiled kernels; contracts identical to ``_numpy``."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _encode(flat):
    n = flat.size
    nruns = 1
    for i in range(1, n):
        if flat[i] != flat[i - 1]:
            nruns += 1
    lead = 1 if flat[0] else 0
    out = np.empty(nruns + lead, dtype=np.int64)
    j = 0
    if flat[0]:
        out[0] = 0
        j = 1
    run = np.int64(1)
    for i in range(1, n):
        if flat[i] == flat[i - 1]:
            run += 1
        else:
            out[j] = run
            j += 1
            run = 1
    out[j] = run
    return out


def rle_encode(flat: np.ndarray) -> np.ndarray:
    return _encode(np.ascontiguousarray(flat, dtype=np.bool_))


@njit(cache=True)
def _decode(counts, size):
    out = np.zeros(size, dtype=np.bool_)
    pos = 0
    for i in range(counts.size):
        c = counts[i]
        if i % 2 == 1:
            out[pos : pos + c] = True
        pos += c
    return out


def rle_decode(counts: np.ndarray, size: int) -> np.ndarray:
    return _decode(counts, size)


@njit(cache=True)
def _overlap(a, b):
    # Two-pointer walk over the run boundaries; no dense decode.
    na = a.size
    nb = b.size
    i = 0
    j = 0
    ea = a[0]
    eb = b[0]
    pos = np.int64(0)
    inter = np.int64(0)
    while i < na and j < nb:
        e = ea if ea < eb else eb
        if i % 2 == 1 and j % 2 == 1:
            inter += e - pos
        pos = e
        if ea == e:
            i += 1
            if i < na:
                ea += a[i]
        if eb == e:
            j += 1
            if j < nb:
                eb += b[j]
    return inter


def rle_overlap(a: np.ndarray, b: np.ndarray) -> int:
    return int(_overlap(a, b))


@njit(cache=True)
def _paint(buf, counts):
    pos = 0
    for i in range(counts.size):
        c = counts[i]
        if i % 2 == 1 and c:
            buf[pos : pos + c] = True
        pos += c


def rle_paint(buf: np.ndarray, counts: np.ndarray) -> None:
    _paint(buf, counts)


@njit(cache=True)
def _fill_polygon(xs, ys, height, width):
    out = np.zeros((height, width), dtype=np.bool_)
    n = xs.size
    y_min = ys[0]
    y_max = ys[0]
    for i in range(1, n):
        if ys[i] < y_min:
            y_min = ys[i]
        if ys[i] > y_max:
            y_max = ys[i]
    r_lo = int(np.floor(y_min - 0.5))
    if r_lo < 0:
        r_lo = 0
    r_hi = int(np.ceil(y_max + 0.5))
    if r_hi > height:
        r_hi = height
    cx = np.empty(n, dtype=np.float64)
    for r in range(r_lo, r_hi):
        yc = r + 0.5
        m = 0
        for i in range(n):
            x1 = xs[i]
            y1 = ys[i]
            i2 = i + 1 if i + 1 < n else 0
            x2 = xs[i2]
            y2 = ys[i2]
            if (y1 <= yc) != (y2 <= yc):
                cx[m] = x1 + (yc - y1) * (x2 - x1) / (y2 - y1)
                m += 1
        if m == 0:
            continue
        sub = np.sort(cx[:m])
        for k in range(0, m - 1, 2):
            c0 = int(np.ceil(sub[k] - 0.5))
            c1 = int(np.ceil(sub[k + 1] - 0.5))
            if c0 < 0:
                c0 = 0
            if c1 > width:
                c1 = width
            for c in range(c0, c1):
                out[r, c] = True
    return out


def fill_polygon(xs: np.ndarray, ys: np.ndarray, height: int, width: int) -> np.ndarray:
    return _fill_polygon(xs, ys, height, width)


@njit(cache=True)
def _erode(img, radius):
    h, w = img.shape
    k = 2 * radius + 1
    tmp = np.empty((h, w), dtype=img.dtype)
    out = np.empty((h, w), dtype=img.dtype)
    for i in range(h):
        for j in range(w):
            best = img[i, j]
            for d in range(k):
                jj = j + d - radius
                if jj < 0:
                    jj = 0
                elif jj >= w:
                    jj = w - 1
                v = img[i, jj]
                if v < best:
                    best = v
            tmp[i, j] = best
    for i in range(h):
        for j in range(w):
            best = tmp[i, j]
            for d in range(k):
                ii = i + d - radius
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                v = tmp[ii, j]
                if v < best:
                    best = v
            out[i, j] = best
    return out


@njit(cache=True)
def _dilate(img, radius):
    h, w = img.shape
    k = 2 * radius + 1
    tmp = np.empty((h, w), dtype=img.dtype)
    out = np.empty((h, w), dtype=img.dtype)
    for i in range(h):
        for j in range(w):
            best = img[i, j]
            for d in range(k):
                jj = j + d - radius
                if jj < 0:
                    jj = 0
                elif jj >= w:
                    jj = w - 1
                v = img[i, jj]
                if v > best:
                    best = v
            tmp[i, j] = best
    for i in range(h):
        for j in range(w):
            best = tmp[i, j]
            for d in range(k):
                ii = i + d - radius
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                v = tmp[ii, j]
                if v > best:
                    best = v
            out[i, j] = best
    return out


def grey_erode(img: np.ndarray, radius: int) -> np.ndarray:
    return _erode(img, radius)


def grey_dilate(img: np.ndarray, radius: int) -> np.ndarray:
    return _dilate(img, radius)


@njit(cache=True)
def _convolve_separable(img, kernel):
    # Taps accumulate in index order; keeps float64 results bit-identical
    # to the numpy backend.
    h, w = img.shape
    nk = kernel.size
    r = nk // 2
    tmp = np.empty((h, w), dtype=np.float64)
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(nk):
                jj = j + k - r
                if jj < 0:
                    jj = 0
                elif jj >= w:
                    jj = w - 1
                acc += kernel[k] * img[i, jj]
            tmp[i, j] = acc
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for k in range(nk):
                ii = i + k - r
                if ii < 0:
                    ii = 0
                elif ii >= h:
                    ii = h - 1
                acc += kernel[k] * tmp[ii, j]
            out[i, j] = acc
    return out


def convolve_separable(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _convolve_separable(np.ascontiguousarray(img, dtype=np.float64), kernel)
