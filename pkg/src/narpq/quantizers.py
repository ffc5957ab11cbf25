"""Codebook learning and lookup: plain, residual, and product quantization.

A product codebook splits an n_z-dim vector into M equal sub-vectors and
quantizes each against its own K-entry sub-codebook, so the effective
composite codebook has K^M entries at the storage cost of M*K. Plain VQ is
the M=1 case; residual quantization instead stacks full-dim codebooks where
each level quantizes the residual left by the previous ones and decoding sums
the chosen codewords.

Training is Lloyd k-means with k-means++ seeding per sub-space, empty
clusters re-seeded to the worst-quantized point, and a fixed iteration budget
with early stop on relative improvement < 1e-6. Per-iteration distortion is
recorded and is non-increasing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import DTYPE, Rng, as_real

CODEBOOK_MAGIC = b"PQCB"
CODEBOOK_VERSION = 1


@dataclass
class SubCodebook:
    codewords: np.ndarray  # (K, dim)

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]


@dataclass
class ProductCodebook:
    subs: list[SubCodebook]
    train_history: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def M(self) -> int:
        return len(self.subs)

    @property
    def K(self) -> int:
        return self.subs[0].K

    @property
    def n_z(self) -> int:
        return sum(s.dim for s in self.subs)


@dataclass
class ResidualCodebook:
    """Stack of full-dimension codebooks; decode is the sum over levels."""

    levels: list[SubCodebook]
    train_history: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def K(self) -> int:
        return self.levels[0].K

    @property
    def n_z(self) -> int:
        return self.levels[0].dim


@dataclass
class QuantResult:
    indices: np.ndarray  # (M,) int64
    z_q: np.ndarray  # (n_z,)
    sq_err: float


def _kmeans_pp_init(vectors: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    """k-means++ seeding; degenerate (all-identical) data gets jittered seeds."""
    n = vectors.shape[0]
    centers = np.empty((k, vectors.shape[1]), dtype=vectors.dtype)
    first = int(rng.integers(0, n))
    centers[0] = vectors[first]
    d2 = np.square(vectors - centers[0]).sum(axis=1, dtype=np.float64)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # every remaining point coincides with a chosen center
            centers[i] = centers[0] + rng.normal(1e-4, size=(vectors.shape[1],))
            continue
        u = rng.random() * total
        j = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        j = min(j, n - 1)
        centers[i] = vectors[j]
        d2 = np.minimum(d2, np.square(vectors - centers[i]).sum(axis=1, dtype=np.float64))
    return centers


def _dedupe_codewords(centers: np.ndarray, rng: Rng) -> np.ndarray:
    # exact duplicates would make argmin ties systematic; jitter them apart
    for i in range(1, centers.shape[0]):
        while any(np.array_equal(centers[i], centers[j]) for j in range(i)):
            centers[i] = centers[i] + rng.normal(1e-4, size=(centers.shape[1],))
    return centers


def kmeans(vectors: np.ndarray, k: int, iters: int, rng: Rng) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations; returns (codewords (k, d), per-iteration distortion)."""
    vectors = as_real(vectors)
    n = vectors.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} vectors, got {n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    centers = _kmeans_pp_init(vectors, k, rng)
    history: list[float] = []
    for _ in range(iters):
        assign, _ = kernels.nearest_codeword(vectors, centers)
        sums, counts = kernels.centroid_update(vectors, assign, k)
        nonempty = counts > 0
        centers[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(DTYPE)
        assign, errs = kernels.nearest_codeword(vectors, centers)
        # Re-seed clusters unused under the post-update assignment to the
        # worst-quantized points. Moving an unused center never raises any
        # point's error, so per-iteration distortion stays non-increasing.
        unused = np.flatnonzero(np.bincount(assign, minlength=k) == 0)
        if unused.size:
            order = np.argsort(errs)[::-1]
            for ci, pos in zip(unused, order):
                centers[ci] = vectors[pos]
            _, errs = kernels.nearest_codeword(vectors, centers)
        dist = float(np.mean(errs, dtype=np.float64))
        history.append(dist)
        if len(history) >= 2 and history[-2] - dist < 1e-6 * max(history[-2], 1e-12):
            break
    centers = _dedupe_codewords(centers, rng)
    return centers, history


def _split(vectors: np.ndarray, m_groups: int) -> list[np.ndarray]:
    n_z = vectors.shape[1]
    d = n_z // m_groups
    return [vectors[:, g * d : (g + 1) * d] for g in range(m_groups)]


def train_pq(vectors: np.ndarray, m_groups: int, k: int, iters: int, rng: Rng) -> ProductCodebook:
    """k-means per sub-space over the column split of `vectors`."""
    vectors = as_real(vectors)
    if vectors.ndim != 2:
        raise ValueError("vectors must be (N, n_z)")
    if m_groups < 1 or vectors.shape[1] % m_groups != 0:
        raise ValueError(f"M={m_groups} must divide n_z={vectors.shape[1]}")
    subs = []
    history = []
    for sub_vecs in _split(vectors, m_groups):
        centers, hist = kmeans(sub_vecs, k, iters, rng)
        subs.append(SubCodebook(centers))
        history.append(hist)
    return ProductCodebook(subs, train_history=history)


def train_vq(vectors: np.ndarray, k: int, iters: int, rng: Rng) -> ProductCodebook:
    return train_pq(vectors, 1, k, iters, rng)


def train_rq(vectors: np.ndarray, n_levels: int, k: int, iters: int, rng: Rng) -> ResidualCodebook:
    """Sequential k-means on the residual left by the previous levels."""
    vectors = as_real(vectors)
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    residual = vectors.copy()
    levels = []
    history = []
    for _ in range(n_levels):
        centers, hist = kmeans(residual, k, iters, rng)
        levels.append(SubCodebook(centers))
        history.append(hist)
        assign, _ = kernels.nearest_codeword(residual, centers)
        residual = residual - centers[assign]
    return ResidualCodebook(levels, train_history=history)


def quantize_batch(cb: ProductCodebook, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized quantization: (N, n_z) -> indices (N, M), sq_errs (N,)."""
    z = as_real(z)
    if z.ndim != 2 or z.shape[1] != cb.n_z:
        raise ValueError(f"expected (N, {cb.n_z}) input, got {z.shape}")
    idx = np.empty((z.shape[0], cb.M), dtype=np.int64)
    err = np.zeros(z.shape[0], dtype=np.float64)
    for m, (sub, part) in enumerate(zip(cb.subs, _split(z, cb.M))):
        i, e = kernels.nearest_codeword(np.ascontiguousarray(part), sub.codewords)
        idx[:, m] = i
        err += e
    return idx, err.astype(DTYPE)


def quantize(cb: ProductCodebook, z: np.ndarray) -> QuantResult:
    """Per group, the codeword minimizing squared L2 (ties to lowest index)."""
    z = as_real(z)
    if z.ndim != 1 or z.shape[0] != cb.n_z:
        raise ValueError(f"expected a length-{cb.n_z} vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("input vector must be finite")
    idx, err = quantize_batch(cb, z[None, :])
    return QuantResult(idx[0], dequantize(cb, idx[0]), float(err[0]))


def dequantize(cb: ProductCodebook, indices) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (cb.M,):
        raise ValueError(f"expected {cb.M} indices, got shape {indices.shape}")
    parts = []
    for sub, i in zip(cb.subs, indices):
        if not 0 <= i < sub.K:
            raise IndexError(f"index {i} out of range for K={sub.K}")
        parts.append(sub.codewords[i])
    return np.concatenate(parts)


def dequantize_batch(cb: ProductCodebook, indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return np.concatenate(
        [sub.codewords[indices[:, m]] for m, sub in enumerate(cb.subs)], axis=1
    )


def rq_quantize_batch(cb: ResidualCodebook, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy level-by-level assignment; returns (indices (N, L), sq_errs (N,))."""
    z = as_real(z)
    residual = z.copy()
    idx = np.empty((z.shape[0], cb.n_levels), dtype=np.int64)
    for lvl, sub in enumerate(cb.levels):
        i, _ = kernels.nearest_codeword(residual, sub.codewords)
        idx[:, lvl] = i
        residual = residual - sub.codewords[i]
    err = np.square(residual).sum(axis=1, dtype=np.float64)
    return idx, err.astype(DTYPE)


def rq_dequantize_batch(cb: ResidualCodebook, indices: np.ndarray) -> np.ndarray:
    out = np.zeros((indices.shape[0], cb.n_z), dtype=DTYPE)
    for lvl, sub in enumerate(cb.levels):
        out += sub.codewords[indices[:, lvl]]
    return out


def distortion(cb, vectors: np.ndarray) -> float:
    """Mean squared quantization error over `vectors`."""
    vectors = as_real(vectors)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValueError("vectors must be a non-empty (N, n_z) array")
    if isinstance(cb, ProductCodebook):
        _, err = quantize_batch(cb, vectors)
    elif isinstance(cb, ResidualCodebook):
        _, err = rq_quantize_batch(cb, vectors)
    else:
        raise TypeError(f"unsupported codebook type {type(cb).__name__}")
    return float(np.mean(err, dtype=np.float64))


def save_codebook(cb: ProductCodebook, path) -> None:
    """Little-endian binary: magic, version, M, K, n_z, then M*K*(n_z/M) f32."""
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<III", CODEBOOK_VERSION, cb.M, cb.K))
        fh.write(struct.pack("<I", cb.n_z))
        for sub in cb.subs:
            fh.write(np.ascontiguousarray(sub.codewords, dtype="<f4").tobytes())


def load_codebook(path) -> ProductCodebook:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"bad codebook magic {magic!r}")
        version, m_groups, k = struct.unpack("<III", fh.read(12))
        if version != CODEBOOK_VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        (n_z,) = struct.unpack("<I", fh.read(4))
        dim = n_z // m_groups
        subs = []
        for _ in range(m_groups):
            raw = fh.read(k * dim * 4)
            cw = np.frombuffer(raw, dtype="<f4").reshape(k, dim).astype(DTYPE)
            subs.append(SubCodebook(cw))
    return ProductCodebook(subs)
