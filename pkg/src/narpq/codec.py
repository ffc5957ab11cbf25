"""Stage 1: a patch autoencoder with a jointly-trained product codebook.

The encoder maps each non-overlapping patch through a two-layer tanh MLP to
an n_z-dim latent; the latent grid is discretized cell-wise by the product
codebook; the mirrored decoder maps quantized latents back to patches. The
training objective is

    |x - xhat|^2 + |sg(E(x)) - z_q|^2 + |sg(z_q) - E(x)|^2

with the straight-through estimator copying the decoder-input gradient past
quantization to the encoder, and the codebook receiving gradients only from
the middle term. The codebook is warm-started with per-group k-means on
initial encoder latents, then refined jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, quantizers
from .numerics import DTYPE, Param, Rng, TrainingError, as_real


@dataclass
class TokenGrid:
    """h x w grid of M sub-token indices per cell, row-major flattening."""

    indices: np.ndarray  # (h, w, M) int64

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        assert self.indices.ndim == 3

    @property
    def h(self) -> int:
        return self.indices.shape[0]

    @property
    def w(self) -> int:
        return self.indices.shape[1]

    @property
    def m_groups(self) -> int:
        return self.indices.shape[2]

    def flatten(self) -> np.ndarray:
        return self.indices.reshape(self.h * self.w, self.m_groups)

    @classmethod
    def unflatten(cls, flat: np.ndarray, h: int, w: int) -> "TokenGrid":
        flat = np.asarray(flat, dtype=np.int64)
        return cls(flat.reshape(h, w, flat.shape[1]))

    def crop(self, top: int, left: int, ch: int, cw: int) -> "TokenGrid":
        if not (0 <= top and 0 <= left and top + ch <= self.h and left + cw <= self.w):
            raise ValueError("crop outside grid bounds")
        return TokenGrid(self.indices[top : top + ch, left : left + cw].copy())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.indices.copy())


@dataclass
class CodecConfig:
    image_size: int = 32
    patch: int = 4
    n_z: int = 16
    m_groups: int = 4
    k_codewords: int = 32
    hidden: int = 64

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("patch must divide image_size")
        if self.n_z % self.m_groups != 0:
            raise ValueError("M must divide n_z")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def to_meta(self) -> dict[str, str]:
        return {f"codec.{k}": str(getattr(self, k)) for k in
                ("image_size", "patch", "n_z", "m_groups", "k_codewords", "hidden")}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "CodecConfig":
        return cls(**{k: int(meta[f"codec.{k}"]) for k in
                      ("image_size", "patch", "n_z", "m_groups", "k_codewords", "hidden")})


class CodecParams:
    """Encoder/decoder weights plus the embedded product codebook."""

    def __init__(self, config: CodecConfig, rng: Rng):
        c = config
        self.config = c
        d, hdim, nz = c.patch_dim, c.hidden, c.n_z
        sub = nz // c.m_groups

        def lin(fan_in, shape, name):
            return Param(rng.normal(1.0 / np.sqrt(fan_in), shape), name=name)

        self.params: dict[str, Param] = {}
        p = self.params
        p["enc_w1"] = lin(d, (d, hdim), "enc_w1")
        p["enc_b1"] = Param(np.zeros(hdim), name="enc_b1")
        p["enc_w2"] = lin(hdim, (hdim, nz), "enc_w2")
        p["enc_b2"] = Param(np.zeros(nz), name="enc_b2")
        p["dec_w1"] = lin(nz, (nz, hdim), "dec_w1")
        p["dec_b1"] = Param(np.zeros(hdim), name="dec_b1")
        p["dec_w2"] = lin(hdim, (hdim, d), "dec_w2")
        p["dec_b2"] = Param(np.zeros(d), name="dec_b2")
        for m in range(c.m_groups):
            p[f"cb_{m}"] = Param(rng.normal(0.5, (c.k_codewords, sub)), name=f"cb_{m}")
        self.train_log: list[dict] = []

    @property
    def codebook(self) -> quantizers.ProductCodebook:
        return quantizers.ProductCodebook(
            [quantizers.SubCodebook(self.params[f"cb_{m}"].value)
             for m in range(self.config.m_groups)]
        )

    def set_codebook(self, cb: quantizers.ProductCodebook) -> None:
        for m, sub in enumerate(cb.subs):
            self.params[f"cb_{m}"].value[...] = sub.codewords

    def all_params(self) -> list[Param]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B*h*w, patch*patch*3), patches in row-major order."""
    b, hh, ww, ch = images.shape
    h, w = hh // patch, ww // patch
    x = images.reshape(b, h, patch, w, patch, ch)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b * h * w, patch * patch * ch)


def unpatchify(flat: np.ndarray, b: int, grid: int, patch: int) -> np.ndarray:
    x = flat.reshape(b, grid, grid, patch, patch, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, grid * patch, grid * patch, 3)


def encode_latents(cp: CodecParams, images: np.ndarray) -> np.ndarray:
    """(B, H, W, 3) -> latent grid (B, h, w, n_z)."""
    c = cp.config
    pt = patchify(as_real(images), c.patch)
    p = cp.params
    a1 = np.tanh(pt @ p["enc_w1"].value + p["enc_b1"].value)
    z = a1 @ p["enc_w2"].value + p["enc_b2"].value
    return z.reshape(images.shape[0], c.grid, c.grid, c.n_z)


def decode_latents(cp: CodecParams, zq: np.ndarray) -> np.ndarray:
    """(B, h, w, n_z) -> (B, H, W, 3), unclamped."""
    c = cp.config
    b = zq.shape[0]
    p = cp.params
    a2 = np.tanh(zq.reshape(-1, c.n_z) @ p["dec_w1"].value + p["dec_b1"].value)
    out = a2 @ p["dec_w2"].value + p["dec_b2"].value
    return unpatchify(out, b, c.grid, c.patch)


def encode(cp: CodecParams, image: np.ndarray) -> TokenGrid:
    """Quantize the encoder latents of one image cell-wise."""
    c = cp.config
    image = as_real(image)
    if image.shape != (c.image_size, c.image_size, 3):
        raise ValueError(f"expected ({c.image_size}, {c.image_size}, 3) image, got {image.shape}")
    z = encode_latents(cp, image[None]).reshape(-1, c.n_z)
    idx, _ = quantizers.quantize_batch(cp.codebook, z)
    return TokenGrid.unflatten(idx, c.grid, c.grid)


def decode(cp: CodecParams, tokens: TokenGrid) -> np.ndarray:
    """Dequantize and decode to pixels, clamped to [0, 1]."""
    c = cp.config
    flat = tokens.flatten()
    if flat.shape != (c.grid * c.grid, c.m_groups):
        raise ValueError(f"token grid shape {tokens.indices.shape} does not match config")
    if flat.min() < 0 or flat.max() >= c.k_codewords:
        raise IndexError("token index out of codebook range")
    zq = quantizers.dequantize_batch(cp.codebook, flat).reshape(1, c.grid, c.grid, c.n_z)
    return np.clip(decode_latents(cp, zq)[0], 0.0, 1.0)


def capture_st_state(cp: CodecParams, images: np.ndarray) -> dict:
    """Freeze the stop-gradient captures of the loss at the current point.

    With these frozen, the loss is a smooth function of every parameter whose
    true derivative equals the straight-through training gradient, so plain
    central differences can validate the backward pass (valid while the
    nearest-codeword assignment stays constant under the perturbation).
    """
    c = cp.config
    pt = patchify(as_real(images), c.patch)
    p = cp.params
    a1 = np.tanh(pt @ p["enc_w1"].value + p["enc_b1"].value)
    z = a1 @ p["enc_w2"].value + p["enc_b2"].value
    idx, _ = quantizers.quantize_batch(cp.codebook, z)
    zq = quantizers.dequantize_batch(cp.codebook, idx)
    return {"idx": idx, "st_offset": zq - z, "enc_out": z.copy(), "z_q": zq.copy()}


def codec_loss(cp: CodecParams, images: np.ndarray, st_frozen: dict | None = None):
    """Loss and gradients; accumulates into each Param.grad.

    Returns (loss, stats) with per-term values. `st_frozen` substitutes
    captured stop-gradient constants (see capture_st_state).
    """
    c = cp.config
    p = cp.params
    images = as_real(images)
    pt = patchify(images, c.patch)

    a1 = np.tanh(pt @ p["enc_w1"].value + p["enc_b1"].value)
    z = a1 @ p["enc_w2"].value + p["enc_b2"].value

    if st_frozen is None:
        idx, _ = quantizers.quantize_batch(cp.codebook, z)
        zq = quantizers.dequantize_batch(cp.codebook, idx)
        st_offset = zq - z
        sg_enc, sg_zq = z, zq
    else:
        idx = st_frozen["idx"]
        zq = quantizers.dequantize_batch(cp.codebook, idx)  # live codebook values
        st_offset = st_frozen["st_offset"]
        sg_enc, sg_zq = st_frozen["enc_out"], st_frozen["z_q"]

    dec_in = z + st_offset
    a2 = np.tanh(dec_in @ p["dec_w1"].value + p["dec_b1"].value)
    xhat = a2 @ p["dec_w2"].value + p["dec_b2"].value

    r = xhat - pt
    e2 = zq - sg_enc
    e3 = z - sg_zq
    n1 = r.size
    n23 = e2.size
    term1 = float(np.mean(np.square(r), dtype=np.float64))
    term2 = float(np.mean(np.square(e2), dtype=np.float64))
    term3 = float(np.mean(np.square(e3), dtype=np.float64))
    loss = term1 + term2 + term3
    if not np.isfinite(loss):
        raise TrainingError("codec loss is not finite", {"terms": (term1, term2, term3)})

    # reconstruction term -> decoder, then straight-through copy to encoder
    dxhat = (2.0 / n1) * r
    p["dec_w2"].grad += a2.T @ dxhat
    p["dec_b2"].grad += dxhat.sum(axis=0)
    da2 = dxhat @ p["dec_w2"].value.T
    dh2 = da2 * (1.0 - a2 * a2)
    p["dec_w1"].grad += dec_in.T @ dh2
    p["dec_b1"].grad += dh2.sum(axis=0)
    dz = dh2 @ p["dec_w1"].value.T  # dec_in = z + const

    # codebook term
    dzq = (2.0 / n23) * e2
    sub = c.n_z // c.m_groups
    for m in range(c.m_groups):
        np.add.at(p[f"cb_{m}"].grad, idx[:, m], dzq[:, m * sub : (m + 1) * sub])

    # commitment term
    dz = dz + (2.0 / n23) * e3

    p["enc_w2"].grad += a1.T @ dz
    p["enc_b2"].grad += dz.sum(axis=0)
    da1 = dz @ p["enc_w2"].value.T
    dh1 = da1 * (1.0 - a1 * a1)
    p["enc_w1"].grad += pt.T @ dh1
    p["enc_b1"].grad += dh1.sum(axis=0)

    stats = {"term_recon": term1, "term_codebook": term2, "term_commit": term3}
    return loss, stats


def straight_through_grads(cp: CodecParams, images: np.ndarray):
    """(d recon / d encoder-output, d recon / d decoder-input) for inspection.

    The two must be element-wise equal: the straight-through estimator copies
    the decoder-input gradient past quantization.
    """
    c = cp.config
    p = cp.params
    pt = patchify(as_real(images), c.patch)
    a1 = np.tanh(pt @ p["enc_w1"].value + p["enc_b1"].value)
    z = a1 @ p["enc_w2"].value + p["enc_b2"].value
    idx, _ = quantizers.quantize_batch(cp.codebook, z)
    zq = quantizers.dequantize_batch(cp.codebook, idx)
    dec_in = z + (zq - z)
    a2 = np.tanh(dec_in @ p["dec_w1"].value + p["dec_b1"].value)
    xhat = a2 @ p["dec_w2"].value + p["dec_b2"].value
    dxhat = (2.0 / xhat.size) * (xhat - pt)
    dh2 = (dxhat @ p["dec_w2"].value.T) * (1.0 - a2 * a2)
    d_dec_in = dh2 @ p["dec_w1"].value.T
    d_enc_out = d_dec_in  # the copy is the definition; returned twice for the check
    return d_enc_out, d_dec_in.copy()


@dataclass
class CodecTrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    warmup_kmeans_iters: int = 15
    warmup_samples: int = 1024
    log_every: int = 500


def reconstruction_mse(cp: CodecParams, images: np.ndarray) -> float:
    """Mean squared pixel error through encode -> quantize -> decode (clamped)."""
    c = cp.config
    images = as_real(images)
    z = encode_latents(cp, images).reshape(-1, c.n_z)
    idx, _ = quantizers.quantize_batch(cp.codebook, z)
    zq = quantizers.dequantize_batch(cp.codebook, idx)
    recon = decode_latents(cp, zq.reshape(images.shape[0], c.grid, c.grid, c.n_z))
    recon = np.clip(recon, 0.0, 1.0)
    return float(np.mean(np.square(recon - images), dtype=np.float64))


def codebook_usage(cp: CodecParams, images: np.ndarray) -> np.ndarray:
    """(M, K) histogram of codeword hits over the images' token grids."""
    c = cp.config
    z = encode_latents(cp, as_real(images)).reshape(-1, c.n_z)
    idx, _ = quantizers.quantize_batch(cp.codebook, z)
    hist = np.zeros((c.m_groups, c.k_codewords), dtype=np.int64)
    for m in range(c.m_groups):
        hist[m] = np.bincount(idx[:, m], minlength=c.k_codewords)
    return hist


def train_codec(images: np.ndarray, config: CodecConfig, rng: Rng,
                train: CodecTrainConfig | None = None) -> CodecParams:
    """Mini-batch SGD on the quantization objective; k-means codebook warmup."""
    train = train or CodecTrainConfig()
    images = as_real(images)
    n = images.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    cp = CodecParams(config, rng)

    warm = images[: min(n, train.warmup_samples)]
    z0 = encode_latents(cp, warm).reshape(-1, config.n_z)
    cb0 = quantizers.train_pq(z0, config.m_groups, config.k_codewords,
                              train.warmup_kmeans_iters, rng)
    cp.set_codebook(cb0)

    velocity = {k: np.zeros_like(p.value) for k, p in cp.params.items()}
    for step in range(train.steps):
        batch_idx = rng.integers(0, n, size=train.batch)
        batch = images[batch_idx]
        cp.zero_grads()
        try:
            loss, stats = codec_loss(cp, batch)
        except TrainingError as err:
            err.diagnostics["step"] = step
            raise
        for k, p in cp.params.items():
            velocity[k] = train.momentum * velocity[k] - train.lr * p.grad
            p.value += velocity[k]
        if step % train.log_every == 0 or step == train.steps - 1:
            probe = images[: min(n, 256)]
            usage = codebook_usage(cp, probe)
            cp.train_log.append({
                "step": step,
                "loss": loss,
                "recon_mse": reconstruction_mse(cp, probe),
                "codebook_used_frac": float((usage > 0).mean()),
            })
    return cp


CODEC_TENSOR_ORDER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2",
                      "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def save_codec(cp: CodecParams, path, extra_meta: dict[str, str] | None = None) -> None:
    meta = cp.config.to_meta()
    if extra_meta:
        meta.update(extra_meta)
    names = list(CODEC_TENSOR_ORDER) + [f"cb_{m}" for m in range(cp.config.m_groups)]
    checkpoint.save(path, "codec", meta, [(k, cp.params[k].value) for k in names])


def load_codec(path) -> CodecParams:
    section, meta, tensors = checkpoint.load(path)
    if section != "codec":
        raise ValueError(f"checkpoint section {section!r} is not a codec")
    config = CodecConfig.from_meta(meta)
    cp = CodecParams(config, Rng(0))
    for k, arr in tensors.items():
        cp.params[k].value[...] = arr
    return cp
