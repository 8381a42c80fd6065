#!/usr/bin/env python3
"""Numba vs numpy timings for every kernel in ``pointnu.kernels``.

Run ``python3 benchmarks/bench_kernels.py [--repeats N] [--size S]``. Each row
checks that both implementations return the same result before timing them.
"""
import argparse
import time

import numpy as np

from pointnu.kernels import KERNELS


def make_inputs(name, size, rng):
    """Argument tuples sized like one ``size x size`` tile at stride 4."""
    h = w = size // 4
    if name == "splat_gaussians":
        n = size * size // 400
        Y = np.zeros((2, h, w))
        return lambda: (Y.copy(), np.zeros((h, w)), np.zeros((h, w), np.int64),
                        rng.integers(0, w, n), rng.integers(0, h, n), rng.integers(0, 2, n),
                        rng.uniform(0.33, 2.0, n), np.arange(1, n + 1))
    if name == "local_peaks":
        heat = rng.random((2, h, w)) ** 4
        return lambda: (heat, 0.4)
    if name == "contingency":
        a = rng.integers(0, 40, (size, size)).astype(np.int32)
        b = rng.integers(0, 40, (size, size)).astype(np.int32)
        return lambda: (a, b, 39, 39)
    if name == "paint_by_priority":
        m = rng.random((64, size, size)) > 0.97
        return lambda: (m,)
    if name == "mask_iou":
        m = rng.random((64, size, size)) > 0.97
        return lambda: (m,)
    raise KeyError(name)


def _result(name, args, out):
    # splat writes into its first three arguments
    return args[:3] if name == "splat_gaussians" else (out,)


def bench(fn, make, repeats):
    times = []
    for _ in range(repeats):
        args = make()
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--size", type=int, default=256)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"tile {args.size}x{args.size}, median of {args.repeats}")
    print(f"{'kernel':<20}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}{'equal':>7}")
    print("-" * 58)
    for name, (fast, slow) in KERNELS.items():
        make = make_inputs(name, args.size, rng)
        a1 = make()
        a2 = tuple(x.copy() if isinstance(x, np.ndarray) else x for x in a1)
        r1 = _result(name, a1, fast(*a1))  # first call also triggers compilation
        r2 = _result(name, a2, slow(*a2))
        equal = all(np.array_equal(np.asarray(x), np.asarray(y)) or np.allclose(x, y) for x, y in zip(r1, r2))
        t_np = bench(slow, make, args.repeats)
        t_nb = bench(fast, make, args.repeats)
        print(f"{name:<20}{t_np * 1e3:>11.3f}{t_nb * 1e3:>11.3f}{t_np / t_nb:>8.1f}x{'ok' if equal else 'FAIL':>7}")


if __name__ == "__main__":
    main()
