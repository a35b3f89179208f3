#!/usr/bin/env python3
"""Time the numba kernels against their numpy twins.

Both paths live side by side in ``vcl_lab._kernels``; the package picks
one at import time from ``VCL_LAB_DISABLE_NUMBA``.  This script calls each
pair directly, checks they agree, and prints the speedup.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from vcl_lab import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def report(name, t_np, t_nb):
    print(f"{name:<26} numpy {t_np * 1e3:9.2f} ms   numba {t_nb * 1e3:9.2f} ms   x{t_np / t_nb:6.1f}")


def bench_row_variances(rng, repeat, show=True):
    x = rng.standard_normal((200_000, 20))
    t_np, a = best_of(lambda: K.row_variances_numpy(x), repeat)
    t_nb, b = best_of(lambda: K.row_variances_numba(x), repeat)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    if show:
        report("row_variances", t_np, t_nb)


def bench_central_moments(rng, repeat):
    x = rng.standard_normal(4_000_000)
    t_np, a = best_of(lambda: K.central_moments_numpy(x), repeat)
    t_nb, b = best_of(lambda: K.central_moments_numba(x), repeat)
    np.testing.assert_allclose(a, b, rtol=1e-10)
    report("central_moments", t_np, t_nb)


def bench_band_counts(rng, repeat):
    v1 = rng.chisquare(19, 1_000_000) / 19
    v2 = rng.chisquare(19, 1_000_000) / 19
    t_np, a = best_of(lambda: K.ratio_band_count_numpy(v1, v2, 0.1, 4.0), repeat)
    t_nb, b = best_of(lambda: K.ratio_band_count_numba(v1, v2, 0.1, 4.0), repeat)
    assert a == b
    report("ratio_band_count", t_np, t_nb)
    t_np, a = best_of(lambda: K.rel_band_count_numpy(v1, 1.0, 0.5), repeat)
    t_nb, b = best_of(lambda: K.rel_band_count_numba(v1, 1.0, 0.5), repeat)
    assert a == b
    report("rel_band_count", t_np, t_nb)


def bench_unit_epoch(rng, repeat, show=True):
    x = rng.standard_normal((20_000, 2))
    order = rng.permutation(x.shape[0])

    def run(kernel):
        theta = np.array([0.6, 0.8])
        beta = np.ones(1)
        vel = np.zeros(3)
        kernel(x, order, theta, beta, vel, 10, 20, 0.01, 0.9, 1.0)
        return theta

    t_np, a = best_of(lambda: run(K.unit_vcl_epoch_numpy), repeat)
    t_nb, b = best_of(lambda: run(K.unit_vcl_epoch_numba), repeat)
    np.testing.assert_allclose(a, b, rtol=1e-8)
    if show:
        report("unit_vcl_epoch (1k steps)", t_np, t_nb)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    # first calls compile (or load the on-disk cache); keep them out of the timings
    bench_row_variances(rng, 1, show=False)
    bench_unit_epoch(rng, 1, show=False)
    print(f"active backend: {K.BACKEND}")
    bench_row_variances(rng, args.repeat)
    bench_central_moments(rng, args.repeat)
    bench_band_counts(rng, args.repeat)
    bench_unit_epoch(rng, args.repeat)


if __name__ == "__main__":
    main()
