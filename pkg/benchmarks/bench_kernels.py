#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs every kernel on a representative document-page workload under both
backends and prints per-call times plus the speedup. Numba functions are
warmed up before timing so compilation cost is excluded; pass --repeat to
change the sample count.

    python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from layoutfuse.kernels import _numba as knb
from layoutfuse.kernels import _numpy as knp


def time_call(fn, args, repeat: int) -> float:
    fn(*args)  # warmup (numba compiles here)
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def build_workloads(rng: np.random.Generator):
    page = rng.random((1024, 768)) < 0.35  # dense speckle, worst-case runs
    flat = page.ravel(order="F")
    counts_a = knp.rle_encode(flat)
    counts_b = knp.rle_encode((rng.random(page.size) < 0.35).ravel())
    buf = np.zeros(page.size, dtype=np.bool_)
    poly_n = 24
    xs = rng.uniform(-50, 818, poly_n)
    ys = rng.uniform(-50, 1074, poly_n)
    gray = rng.integers(0, 256, (1024, 768)).astype(np.uint8)
    sigma = 1.5
    radius = int(np.ceil(3 * sigma))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    grayf = gray.astype(np.float64)
    return [
        ("rle_encode (1024x768)", "rle_encode", (flat,)),
        ("rle_decode (1024x768)", "rle_decode", (counts_a, flat.size)),
        ("rle_overlap (2 pages)", "rle_overlap", (counts_a, counts_b)),
        ("rle_paint (1024x768)", "rle_paint", (buf, counts_a)),
        ("fill_polygon (24 verts)", "fill_polygon", (xs, ys, 1024, 768)),
        ("grey_erode (r=2)", "grey_erode", (gray, 2)),
        ("grey_dilate (r=2)", "grey_dilate", (gray, 2)),
        ("convolve_separable (sigma=1.5)", "convolve_separable", (grayf, taps)),
    ]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5, help="timing samples per kernel")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    rows = []
    for label, name, call_args in build_workloads(rng):
        t_np = time_call(getattr(knp, name), call_args, args.repeat)
        t_nb = time_call(getattr(knb, name), call_args, args.repeat)
        rows.append((label, t_np, t_nb, t_np / t_nb))

    header = f"{'kernel':<32} {'numpy':>10} {'numba':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, t_np, t_nb, speedup in rows:
        print(f"{label:<32} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {speedup:>7.1f}x")


if __name__ == "__main__":
    main()
