"""Nearest-codeword hot loops: numba-jitted kernels with a pure-numpy fallback.

Backend selection via the NARPQ_BACKEND env var:

  auto   (default) use numba when it imports, else numpy
  numba  require numba, raise if unavailable
  numpy  force the pure-numpy path

Both paths compute plain squared euclidean distances (no |x|^2 - 2xc + |c|^2
expansion) so argmin tie-breaking (lowest index) agrees across backends.
NARPQ_THREADS caps the numba thread pool.
"""

from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("NARPQ_BACKEND", "auto")
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"NARPQ_BACKEND must be auto|numba|numpy, got {_requested!r}")

_numba_ok = False
if _requested in ("auto", "numba"):
    try:
        import warnings

        # stale TBB in this environment; numba falls back to its workqueue layer
        warnings.filterwarnings("ignore", message=".*TBB.*", category=Warning)
        import numba
        from numba import njit, prange

        _threads = os.environ.get("NARPQ_THREADS", "")
        if _threads.strip():
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        _numba_ok = True
    except ImportError:
        if _requested == "numba":
            raise

BACKEND = "numba" if _numba_ok else "numpy"


def nearest_codeword_numpy(x: np.ndarray, codewords: np.ndarray):
    """Assign each row of x (N, d) to its closest row of codewords (K, d).

    Returns (indices (N,) int64, sq_errs (N,) float). Ties break to the
    lowest codeword index. Chunked so the N*K*d intermediate stays small.
    """
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    err = np.empty(n, dtype=x.dtype)
    chunk = max(1, 2_000_000 // max(1, codewords.shape[0] * codewords.shape[1]))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        d2 = np.square(x[s:e, None, :] - codewords[None, :, :]).sum(axis=2, dtype=np.float64)
        idx[s:e] = np.argmin(d2, axis=1)
        err[s:e] = d2[np.arange(e - s), idx[s:e]].astype(x.dtype)
    return idx, err


def centroid_update_numpy(x: np.ndarray, assign: np.ndarray, k: int):
    """Per-cluster sums and counts for a k-means update step."""
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, assign, x.astype(np.float64))
    counts = np.bincount(assign, minlength=k).astype(np.int64)
    return sums, counts


if _numba_ok:

    @njit(cache=True)
    def _nearest_codeword_serial(x, codewords):
        n, d = x.shape
        k = codewords.shape[0]
        idx = np.empty(n, dtype=np.int64)
        err = np.empty(n, dtype=x.dtype)
        for i in range(n):
            best = -1
            best_d = np.inf
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = x[i, j] - codewords[c, j]
                    acc += diff * diff
                if acc < best_d:
                    best_d = acc
                    best = c
            idx[i] = best
            err[i] = best_d
        return idx, err

    @njit(cache=True, parallel=True)
    def _nearest_codeword_parallel(x, codewords):
        n, d = x.shape
        k = codewords.shape[0]
        idx = np.empty(n, dtype=np.int64)
        err = np.empty(n, dtype=x.dtype)
        for i in prange(n):
            best = -1
            best_d = np.inf
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = x[i, j] - codewords[c, j]
                    acc += diff * diff
                if acc < best_d:
                    best_d = acc
                    best = c
            idx[i] = best
            err[i] = best_d
        return idx, err

    @njit(cache=True)
    def _centroid_update_jit(x, assign, k):
        d = x.shape[1]
        sums = np.zeros((k, d), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for i in range(x.shape[0]):
            a = assign[i]
            counts[a] += 1
            for j in range(d):
                sums[a, j] += x[i, j]
        return sums, counts

    # below this work size, thread-pool dispatch costs more than the loop
    _PARALLEL_CUTOVER = 1 << 21

    def nearest_codeword(x, codewords):
        x = np.ascontiguousarray(x)
        codewords = np.ascontiguousarray(codewords)
        work = x.shape[0] * codewords.shape[0] * codewords.shape[1]
        if work >= _PARALLEL_CUTOVER:
            return _nearest_codeword_parallel(x, codewords)
        return _nearest_codeword_serial(x, codewords)

    def centroid_update(x, assign, k):
        return _centroid_update_jit(np.ascontiguousarray(x), assign, k)

else:
    nearest_codeword = nearest_codeword_numpy
    centroid_update = centroid_update_numpy
