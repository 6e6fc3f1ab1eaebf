"""Benchmark the jitted kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--rows 2000000] [--segments 50000]

The same comparison can be forced package-wide by setting ROLEGNN_NO_NUMBA=1.
"""

import argparse
import time

import numpy as np

from rolegnn import kernels


def timeit(fn, repeats=5):
    fn()  # warm-up (includes jit compilation on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(rows: int, segments: int):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(rows, 32))
    seg = rng.integers(0, segments, size=rows)

    n_nodes = segments
    dst = np.sort(rng.integers(0, n_nodes, size=rows))
    times = rng.uniform(0, 1e6, size=rows)
    order = np.lexsort((times, dst))
    times = times[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, dst[order] + 1, 1)
    indptr = np.cumsum(indptr)
    queries = rng.integers(0, n_nodes, size=20_000)
    cuts = rng.uniform(0, 1e6, size=20_000)

    cases = {
        "segment_sum": lambda: kernels.segment_sum(values, seg, segments),
        "segment_max": lambda: kernels.segment_max(values, seg, segments),
        "admissible_counts": lambda: kernels.admissible_counts(
            indptr, times, queries, cuts),
    }

    results = {}
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    for backend in backends:
        kernels.set_backend(backend)
        for name, fn in cases.items():
            results[(name, backend)] = timeit(fn)

    print(f"rows={rows} segments={segments} feature_dim=32 queries=20000")
    print(f"{'kernel':<20} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name in cases:
        np_t = results[(name, "numpy")]
        if ("numba" in backends):
            nb_t = results[(name, "numba")]
            print(f"{name:<20} {np_t * 1e3:>10.2f}ms {nb_t * 1e3:>10.2f}ms "
                  f"{np_t / nb_t:>8.1f}x")
        else:
            print(f"{name:<20} {np_t * 1e3:>10.2f}ms {'n/a':>12} {'':>9}")

    # both backends must agree exactly
    if "numba" in backends:
        kernels.set_backend("numpy")
        a = kernels.segment_sum(values[:10_000], seg[:10_000], segments)
        c1 = kernels.admissible_counts(indptr, times, queries, cuts)
        kernels.set_backend("numba")
        b = kernels.segment_sum(values[:10_000], seg[:10_000], segments)
        c2 = kernels.admissible_counts(indptr, times, queries, cuts)
        assert np.array_equal(a, b) and np.array_equal(c1, c2)
        print("backend outputs identical: yes")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--rows", type=int, default=2_000_000)
    parser.add_argument("--segments", type=int, default=50_000)
    args = parser.parse_args()
    bench(args.rows, args.segments)
