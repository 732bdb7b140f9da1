#!/usr/bin/env python3
"""Benchmark the numba and numpy kernel backends against each other.

Times conv2d / maxpool2d forward and backward on shapes the model actually
runs (backbone stages at the desk 64-pixel configuration and the 224-pixel
setting), prints a table, and cross-checks that both backends agree.

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]

The active model backend is chosen by DUOFORMER_BACKEND (auto|numba|numpy);
this script always times both.
"""

import argparse
import time

import numpy as np

from duoformer.kernels import numpy_impl
from duoformer.rng import Rng

try:
    from duoformer.kernels import numba_impl
except ImportError:  # pragma: no cover
    numba_impl = None

CONV_SHAPES = [
    # label, n, cin, h, cout, k, stride, pad
    ("stem 64px", 8, 3, 64, 16, 3, 2, 1),
    ("stage1 64px", 8, 16, 16, 32, 3, 2, 1),
    ("stage3 64px", 8, 64, 4, 128, 3, 2, 1),
    ("stem 224px", 2, 3, 224, 16, 3, 2, 1),
]

POOL_SHAPES = [
    ("stem pool 64px", 8, 16, 32, 2, 2),
    ("token pool 64px", 8, 16, 8, 4, 4),
    ("stem pool 224px", 2, 16, 112, 2, 2),
]


def _time(fn, repeats):
    fn()  # warmup / jit compile
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_conv(impl, case, repeats):
    label, n, cin, h, cout, k, stride, pad = case
    rng = Rng(1)
    x = rng.normal((n, cin, h, h))
    w = rng.normal((cout, cin, k, k))
    oh = (h + 2 * pad - k) // stride + 1
    g = rng.normal((n, cout, oh, oh))
    fwd = _time(lambda: impl.conv2d_forward(x, w, stride, pad), repeats)
    bwd = _time(lambda: impl.conv2d_backward(x, w, g, stride, pad), repeats)
    return fwd, bwd, impl.conv2d_forward(x, w, stride, pad)


def bench_pool(impl, case, repeats):
    label, n, c, h, k, s = case
    rng = Rng(2)
    x = rng.normal((n, c, h, h))
    oh = (h - k) // s + 1
    g = rng.normal((n, c, oh, oh))
    out, argmax = impl.maxpool2d_forward(x, k, s)
    fwd = _time(lambda: impl.maxpool2d_forward(x, k, s), repeats)
    bwd = _time(lambda: impl.maxpool2d_backward(x.shape, argmax, g, k, s), repeats)
    return fwd, bwd, out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    impls = [("numpy", numpy_impl)]
    if numba_impl is not None:
        impls.append(("numba", numba_impl))
    else:
        print("numba unavailable; timing numpy only")

    header = f"{'kernel':<22}{'dir':<6}" + "".join(f"{name:>12}" for name, _ in impls)
    print(header)
    print("-" * len(header))

    for case in CONV_SHAPES:
        rows = {"fwd": [], "bwd": []}
        outs = []
        for _, impl in impls:
            fwd, bwd, out = bench_conv(impl, case, args.repeats)
            rows["fwd"].append(fwd)
            rows["bwd"].append(bwd)
            outs.append(out)
        for direction in ("fwd", "bwd"):
            cells = "".join(f"{t * 1e3:>10.2f}ms" for t in rows[direction])
            print(f"conv {case[0]:<17}{direction:<6}{cells}")
        if len(outs) == 2:
            assert np.abs(outs[0] - outs[1]).max() < 1e-12, "backends disagree"

    for case in POOL_SHAPES:
        rows = {"fwd": [], "bwd": []}
        outs = []
        for _, impl in impls:
            fwd, bwd, out = bench_pool(impl, case, args.repeats)
            rows["fwd"].append(fwd)
            rows["bwd"].append(bwd)
            outs.append(out)
        for direction in ("fwd", "bwd"):
            cells = "".join(f"{t * 1e3:>10.2f}ms" for t in rows[direction])
            print(f"pool {case[0]:<17}{direction:<6}{cells}")
        if len(outs) == 2:
            assert np.array_equal(outs[0], outs[1]), "backends disagree"

    print("\nbackends agree on all benchmarked shapes")


if __name__ == "__main__":
    main()
