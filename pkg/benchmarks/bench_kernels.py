"""Benchmark the nearest-codeword kernels: numba JIT vs pure numpy.

Run after installing the package:

    python benchmarks/bench_kernels.py

NARPQ_BACKEND=numpy skips the JIT side entirely (nothing to compare then).
"""

from __future__ import annotations

import time

import numpy as np

from narpq import kernels
from narpq.numerics import Rng


def bench(fn, *args, reps: int = 20) -> float:
    fn(*args)  # warmup / JIT compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main() -> None:
    print(f"active backend: {kernels.BACKEND}")
    rng = Rng(0)
    cases = [
        (2_048, 32, 4, "codec-train assignment"),
        (10_000, 64, 8, "ablation k-means step"),
        (100_000, 64, 8, "large k-means step"),
        (100_000, 256, 16, "paper-scale-ish step"),
    ]
    print(f"{'case':28s} {'N':>8s} {'K':>4s} {'d':>3s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for n, k, d, label in cases:
        x = rng.normal(1.0, (n, d))
        cw = rng.normal(1.0, (k, d))
        t_np = bench(kernels.nearest_codeword_numpy, x, cw)
        if kernels.BACKEND == "numba":
            t_nb = bench(kernels.nearest_codeword, x, cw)
            i1, e1 = kernels.nearest_codeword(x, cw)
            i2, e2 = kernels.nearest_codeword_numpy(x, cw)
            assert np.array_equal(i1, i2), "backend disagreement"
            print(f"{label:28s} {n:8d} {k:4d} {d:3d} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} "
                  f"{t_np / t_nb:7.2f}x")
        else:
            print(f"{label:28s} {n:8d} {k:4d} {d:3d} {t_np * 1e3:10.3f} {'-':>10s} {'-':>8s}")

    # centroid accumulation
    n, k, d = 100_000, 64, 8
    x = rng.normal(1.0, (n, d))
    assign = rng.integers(0, k, size=n).astype(np.int64)
    t_np = bench(kernels.centroid_update_numpy, x, assign, k)
    if kernels.BACKEND == "numba":
        t_nb = bench(kernels.centroid_update, x, assign, k)
        print(f"{'centroid update':28s} {n:8d} {k:4d} {d:3d} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} "
              f"{t_np / t_nb:7.2f}x")
    else:
        print(f"{'centroid update':28s} {n:8d} {k:4d} {d:3d} {t_np * 1e3:10.3f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
