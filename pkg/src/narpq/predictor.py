"""Bidirectional transformer scoring every target cell of a token sequence.

Forward and backward passes are written directly in numpy. Visual slots are
embedded as the sum of their M per-group sub-token embeddings plus learned
2-D (row + column) position embeddings; text slots use word plus 1-D
position embeddings; every slot adds a segment embedding. Attention is full
bidirectional (the only masking is key padding), pre-LN, tanh-approximated
GELU in the feed-forward blocks, and M independent K-way output heads score
the grouped sub-tokens of each target cell.

The training objective is the mean softmax cross-entropy over masked target
cells and groups; train_step applies SGD with momentum and global-norm
gradient clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint, protocol
from .numerics import DTYPE, Param, Rng, TrainingError, log_softmax

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_LN_EPS = 1e-5
_NEG = -1e9


@dataclass
class PredictorConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn: int = 256
    m_groups: int = 4
    k_vocab: int = 32
    n_words: int = 12
    max_seq: int = 256
    dropout: float = 0.0
    grid_h: int = 8
    grid_w: int = 8
    max_text: int = 16

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("heads must divide hidden")

    def to_meta(self) -> dict[str, str]:
        keys = ("layers", "hidden", "heads", "ffn", "m_groups", "k_vocab", "n_words",
                "max_seq", "grid_h", "grid_w", "max_text")
        meta = {f"predictor.{k}": str(getattr(self, k)) for k in keys}
        meta["predictor.dropout"] = repr(self.dropout)
        return meta

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "PredictorConfig":
        keys = ("layers", "hidden", "heads", "ffn", "m_groups", "k_vocab", "n_words",
                "max_seq", "grid_h", "grid_w", "max_text")
        kw = {k: int(meta[f"predictor.{k}"]) for k in keys}
        kw["dropout"] = float(meta.get("predictor.dropout", "0.0"))
        return cls(**kw)


class PredictorParams:
    """All weights, in a fixed declaration order (embeddings, layers, heads)."""

    def __init__(self, config: PredictorConfig, rng: Rng):
        self.config = c = config
        hdim = c.hidden
        init = 0.02

        self.params: dict[str, Param] = {}

        def add(name, shape, scale=init):
            self.params[name] = Param(rng.normal(scale, shape), name=name)

        def add_const(name, shape, value=0.0):
            self.params[name] = Param(np.full(shape, value, dtype=DTYPE), name=name)

        for m in range(c.m_groups):
            add(f"vis_emb_{m}", (c.k_vocab + 1, hdim))
        add("text_emb", (c.n_words + 1, hdim))
        add("special_emb", (protocol.N_SPECIAL, hdim))
        add("row_emb", (c.grid_h, hdim))
        add("col_emb", (c.grid_w, hdim))
        add("textpos_emb", (c.max_text, hdim))
        add("seg_emb", (4, hdim))
        for layer in range(c.layers):
            pre = f"l{layer}_"
            add_const(pre + "ln1_g", (hdim,), 1.0)
            add_const(pre + "ln1_b", (hdim,))
            for nm in ("wq", "wk", "wv", "wo"):
                add(pre + nm, (hdim, hdim))
            for nm in ("bq", "bk", "bv", "bo"):
                add_const(pre + nm, (hdim,))
            add_const(pre + "ln2_g", (hdim,), 1.0)
            add_const(pre + "ln2_b", (hdim,))
            add(pre + "fw1", (hdim, c.ffn))
            add_const(pre + "fb1", (c.ffn,))
            add(pre + "fw2", (c.ffn, hdim))
            add_const(pre + "fb2", (hdim,))
        add_const("lnf_g", (hdim,), 1.0)
        add_const("lnf_b", (hdim,))
        add("head_w", (c.m_groups, hdim, c.k_vocab))
        add_const("head_b", (c.m_groups, c.k_vocab))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def all_params(self) -> list[Param]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class SeqBatch:
    """Padded stack of sequences ready for the transformer."""

    ids: np.ndarray         # (B, L, M)
    kind: np.ndarray        # (B, L)
    segment: np.ndarray     # (B, L)
    rows: np.ndarray        # (B, L)
    cols: np.ndarray        # (B, L)
    pos1: np.ndarray        # (B, L)
    key_mask: np.ndarray    # (B, L) bool, True for real slots
    target_index: np.ndarray  # (B, T) sequence position of each target cell

    @property
    def size(self) -> tuple[int, int]:
        return self.ids.shape[0], self.ids.shape[1]


def make_batch(seqs: list[protocol.MultiModalSequence]) -> SeqBatch:
    b = len(seqs)
    lmax = max(len(s) for s in seqs)
    m = seqs[0].m_groups
    t = seqs[0].h * seqs[0].w
    ids = np.zeros((b, lmax, m), dtype=np.int64)
    kind = np.full((b, lmax), protocol.KIND_PAD, dtype=np.int8)
    segment = np.full((b, lmax), protocol.SEG_PAD, dtype=np.int8)
    rows = np.zeros((b, lmax), dtype=np.int64)
    cols = np.zeros((b, lmax), dtype=np.int64)
    pos1 = np.zeros((b, lmax), dtype=np.int64)
    key_mask = np.zeros((b, lmax), dtype=bool)
    target_index = np.zeros((b, t), dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        ids[i, :n] = s.ids
        kind[i, :n] = s.kind
        segment[i, :n] = s.segment
        rows[i, :n] = s.rows
        cols[i, :n] = s.cols
        pos1[i, :n] = s.pos1
        key_mask[i, :n] = True
        target_index[i] = s.target_pos
        # pads embed as the PAD special token
        ids[i, n:, 0] = protocol.SP_PAD
        kind[i, n:] = protocol.KIND_SPECIAL
    return SeqBatch(ids, kind, segment, rows, cols, pos1, key_mask, target_index)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)

def _layer_norm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    # tanh approximation, built with in-place ops to limit temporaries
    t = x * x
    t *= x
    t *= 0.044715
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t

def _gelu_bwd(dy, x, t):
    du = x * x
    du *= 0.134145
    du += 1.0
    du *= _GELU_C
    inner = t * t
    np.subtract(1.0, inner, out=inner)
    inner *= x
    inner *= du
    inner += 1.0
    inner += t
    inner *= 0.5
    inner *= dy
    return inner


def _embed(pp: PredictorParams, batch: SeqBatch):
    c = pp.config
    is_vis = batch.kind == protocol.KIND_VISUAL
    is_text = batch.kind == protocol.KIND_TEXT
    is_special = batch.kind == protocol.KIND_SPECIAL
    # ids of other slot families can exceed a given table; zero them before
    # the gather, the mask discards those rows anyway
    vis_ids = np.where(is_vis[:, :, None], batch.ids, 0)
    text_ids = np.where(is_text, batch.ids[:, :, 0], 0)
    special_ids = np.where(is_special, batch.ids[:, :, 0], 0)
    x = pp["seg_emb"][batch.segment].copy()
    for m in range(c.m_groups):
        x += pp[f"vis_emb_{m}"][vis_ids[:, :, m]] * is_vis[:, :, None]
    x += (pp["row_emb"][batch.rows] + pp["col_emb"][batch.cols]) * is_vis[:, :, None]
    x += pp["text_emb"][text_ids] * is_text[:, :, None]
    x += pp["textpos_emb"][batch.pos1] * is_text[:, :, None]
    x += pp["special_emb"][special_ids] * is_special[:, :, None]
    return x.astype(DTYPE), (is_vis, is_text, is_special)

def _scatter_rows(grad: np.ndarray, idx: np.ndarray, d: np.ndarray) -> None:
    # one-hot matmul beats np.add.at by ~10x at these sizes
    onehot = np.zeros((idx.shape[0], grad.shape[0]), dtype=d.dtype)
    onehot[np.arange(idx.shape[0]), idx] = 1.0
    grad += onehot.T @ d


def _embed_bwd(pp: PredictorParams, batch: SeqBatch, dx, masks):
    is_vis, is_text, is_special = masks
    g = pp.params
    flat_dx = dx.reshape(-1, dx.shape[-1])
    _scatter_rows(g["seg_emb"].grad, batch.segment.reshape(-1), flat_dx)
    dvis = dx[is_vis]
    for m in range(pp.config.m_groups):
        _scatter_rows(g[f"vis_emb_{m}"].grad, batch.ids[:, :, m][is_vis], dvis)
    _scatter_rows(g["row_emb"].grad, batch.rows[is_vis], dvis)
    _scatter_rows(g["col_emb"].grad, batch.cols[is_vis], dvis)
    dtext = dx[is_text]
    _scatter_rows(g["text_emb"].grad, batch.ids[:, :, 0][is_text], dtext)
    _scatter_rows(g["textpos_emb"].grad, batch.pos1[is_text], dtext)
    _scatter_rows(g["special_emb"].grad, batch.ids[:, :, 0][is_special], dx[is_special])


def _split_heads(x, heads):
    b, l, h = x.shape
    # contiguous copy keeps the batched matmuls on the fast BLAS path
    return np.ascontiguousarray(x.reshape(b, l, heads, h // heads).transpose(0, 2, 1, 3))

def _merge_heads(x):
    b, nh, l, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, l, nh * dh)


def forward(pp: PredictorParams, batch: SeqBatch, want_cache: bool = False,
            dropout_rng: Rng | None = None):
    """Logits (B, T, M, K) for every target cell; optionally a backward cache."""
    c = pp.config
    b, l = batch.size
    if l > c.max_seq:
        raise ValueError(f"sequence length {l} exceeds max_seq={c.max_seq}")
    if int(batch.ids.max()) > max(c.k_vocab, c.n_words, protocol.N_SPECIAL):
        raise ValueError("token id out of range")
    drop = c.dropout if dropout_rng is not None else 0.0

    x, emb_masks = _embed(pp, batch)
    # additive bias keyed on padding; real pairs are all-ones attention
    att_bias = np.where(batch.key_mask, 0.0, _NEG).astype(DTYPE)[:, None, None, :]
    scale = 1.0 / np.sqrt(c.hidden // c.heads)

    layers_cache = []
    for li in range(c.layers):
        pre = f"l{li}_"
        a, ln1c = _layer_norm(x, pp[pre + "ln1_g"], pp[pre + "ln1_b"])
        q = _split_heads(a @ pp[pre + "wq"] + pp[pre + "bq"], c.heads)
        k = _split_heads(a @ pp[pre + "wk"] + pp[pre + "bk"], c.heads)
        v = _split_heads(a @ pp[pre + "wv"] + pp[pre + "bv"], c.heads)
        w = q @ k.transpose(0, 1, 3, 2)  # becomes the attention weights in place
        w *= scale
        w += att_bias
        w -= w.max(axis=-1, keepdims=True)
        np.exp(w, out=w)
        w /= w.sum(axis=-1, keepdims=True)
        o = _merge_heads(w @ v)
        proj = o @ pp[pre + "wo"]
        proj += pp[pre + "bo"]
        dmask1 = None
        if drop > 0.0:
            dmask1 = (dropout_rng.random(proj.shape) >= drop) / (1.0 - drop)
            proj *= dmask1
        x1 = x + proj
        f_in, ln2c = _layer_norm(x1, pp[pre + "ln2_g"], pp[pre + "ln2_b"])
        hf = f_in @ pp[pre + "fw1"]
        hf += pp[pre + "fb1"]
        af, gelu_t = _gelu(hf)
        ff = af @ pp[pre + "fw2"]
        ff += pp[pre + "fb2"]
        dmask2 = None
        if drop > 0.0:
            dmask2 = (dropout_rng.random(ff.shape) >= drop) / (1.0 - drop)
            ff *= dmask2
        x2 = x1 + ff
        layers_cache.append({"x": x, "a": a, "ln1": ln1c, "q": q, "k": k, "v": v,
                             "w": w, "o": o, "x1": x1, "f_in": f_in, "ln2": ln2c,
                             "hf": hf, "af": af, "gelu_t": gelu_t,
                             "dmask1": dmask1, "dmask2": dmask2})
        x = x2

    y, lnfc = _layer_norm(x, pp["lnf_g"], pp["lnf_b"])
    bi = np.arange(b)[:, None]
    th = y[bi, batch.target_index]  # (B, T, H)
    t = th.shape[1]
    head_flat = pp["head_w"].transpose(1, 0, 2).reshape(c.hidden, c.m_groups * c.k_vocab)
    logits = (th.reshape(b * t, c.hidden) @ head_flat).reshape(b, t, c.m_groups, c.k_vocab)
    logits = logits + pp["head_b"]

    cache = None
    if want_cache:
        cache = {"layers": layers_cache, "x_final": x, "lnf": lnfc, "y": y, "th": th,
                 "emb_masks": emb_masks, "scale": scale}
    return logits.astype(DTYPE), cache


def backward(pp: PredictorParams, batch: SeqBatch, cache: dict, dlogits: np.ndarray) -> None:
    """Accumulate gradients of a scalar whose logits-gradient is `dlogits`."""
    c = pp.config
    g = pp.params
    b, l = batch.size
    bi = np.arange(b)[:, None]

    th = cache["th"]
    t = th.shape[1]
    th_flat = th.reshape(b * t, c.hidden)
    dlog_flat = dlogits.reshape(b * t, c.m_groups * c.k_vocab)
    dhead_flat = th_flat.T @ dlog_flat  # (H, M*K)
    g["head_w"].grad += dhead_flat.reshape(c.hidden, c.m_groups, c.k_vocab).transpose(1, 0, 2)
    g["head_b"].grad += dlogits.sum(axis=(0, 1))
    head_flat = pp["head_w"].transpose(1, 0, 2).reshape(c.hidden, c.m_groups * c.k_vocab)
    dth = (dlog_flat @ head_flat.T).reshape(b, t, c.hidden)

    dy = np.zeros_like(cache["y"])
    dy[bi, batch.target_index] = dth  # target positions are unique per row
    dx, dgf, dbf = _layer_norm_bwd(dy, pp["lnf_g"], cache["lnf"])
    g["lnf_g"].grad += dgf
    g["lnf_b"].grad += dbf

    for li in reversed(range(c.layers)):
        pre = f"l{li}_"
        lc = cache["layers"][li]
        # FFN block
        dff = dx if lc["dmask2"] is None else dx * lc["dmask2"]
        g[pre + "fw2"].grad += lc["af"].reshape(-1, c.ffn).T @ dff.reshape(-1, c.hidden)
        g[pre + "fb2"].grad += dff.sum(axis=(0, 1))
        daf = dff @ pp[pre + "fw2"].T
        dhf = _gelu_bwd(daf, lc["hf"], lc["gelu_t"])
        g[pre + "fw1"].grad += lc["f_in"].reshape(-1, c.hidden).T @ dhf.reshape(-1, c.ffn)
        g[pre + "fb1"].grad += dhf.sum(axis=(0, 1))
        df_in = dhf @ pp[pre + "fw1"].T
        dx1_ln, dg2, db2 = _layer_norm_bwd(df_in, pp[pre + "ln2_g"], lc["ln2"])
        g[pre + "ln2_g"].grad += dg2
        g[pre + "ln2_b"].grad += db2
        dx1 = dx + dx1_ln
        # attention block
        dproj = dx1 if lc["dmask1"] is None else dx1 * lc["dmask1"]
        g[pre + "wo"].grad += lc["o"].reshape(-1, c.hidden).T @ dproj.reshape(-1, c.hidden)
        g[pre + "bo"].grad += dproj.sum(axis=(0, 1))
        do = _split_heads(dproj @ pp[pre + "wo"].T, c.heads)
        w = lc["w"]
        dw = do @ lc["v"].transpose(0, 1, 3, 2)
        dv = w.transpose(0, 1, 3, 2) @ do
        dw -= (dw * w).sum(axis=-1, keepdims=True)
        dw *= w  # dw is now d(scores)
        dq = dw @ lc["k"]
        dq *= cache["scale"]
        dk = dw.transpose(0, 1, 3, 2) @ lc["q"]
        dk *= cache["scale"]
        da = np.zeros_like(lc["a"])
        for mat, name in ((dq, "wq"), (dk, "wk"), (dv, "wv")):
            merged = _merge_heads(mat)
            g[pre + name].grad += lc["a"].reshape(-1, c.hidden).T @ merged.reshape(-1, c.hidden)
            g[pre + "b" + name[1]].grad += merged.sum(axis=(0, 1))
            da += merged @ pp[pre + name].T
        dx_ln, dg1, db1 = _layer_norm_bwd(da, pp[pre + "ln1_g"], lc["ln1"])
        g[pre + "ln1_g"].grad += dg1
        g[pre + "ln1_b"].grad += db1
        dx = dx1 + dx_ln

    _embed_bwd(pp, batch, dx, cache["emb_masks"])


def slot_distributions(logits: np.ndarray) -> np.ndarray:
    """Per-cell per-group probabilities: softmax over the K axis."""
    return np.exp(log_softmax(logits, axis=-1))


def slot_scores(probs: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Geometric mean over groups of the chosen sub-tokens' probabilities.

    probs: (..., M, K); chosen: (..., M) -> scores (...,) in (0, 1].
    """
    picked = np.take_along_axis(probs, chosen[..., None], axis=-1)[..., 0]
    return np.exp(np.mean(np.log(np.maximum(picked, 1e-30)), axis=-1))


def nar_loss(pp: PredictorParams, batch: SeqBatch, true_ids: np.ndarray,
             mask_flags: np.ndarray, with_grads: bool = True,
             dropout_rng: Rng | None = None) -> float:
    """Mean masked cross-entropy over (masked cell, group) pairs.

    true_ids: (B, T, M) ground-truth sub-tokens; mask_flags: (B, T) bool for
    cells in the masked set. Gradients accumulate into the params.
    """
    if not mask_flags.any():
        raise ValueError("the masked set is empty")
    logits, cache = forward(pp, batch, want_cache=with_grads, dropout_rng=dropout_rng)
    sel = logits[mask_flags]                # (Nm, M, K)
    tgt = true_ids[mask_flags]              # (Nm, M)
    logp = log_softmax(sel, axis=-1)
    nm, m_groups, _ = sel.shape
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean(dtype=np.float64))
    if not np.isfinite(loss):
        raise TrainingError("predictor loss is not finite")
    if with_grads:
        dsel = np.exp(logp)
        dsel[np.arange(nm)[:, None], np.arange(m_groups)[None, :], tgt] -= 1.0
        dsel /= nm * m_groups
        dlogits = np.zeros_like(logits)
        dlogits[mask_flags] = dsel
        backward(pp, batch, cache, dlogits)
    return loss


@dataclass
class SgdState:
    lr: float = 0.1
    momentum: float = 0.9
    clip: float = 1.0
    velocity: dict | None = None


def train_step(pp: PredictorParams, batch: SeqBatch, true_ids: np.ndarray,
               mask_flags: np.ndarray, opt: SgdState,
               dropout_rng: Rng | None = None) -> float:
    """One clipped SGD-with-momentum update; deterministic given inputs."""
    if opt.velocity is None:
        opt.velocity = {k: np.zeros_like(p.value) for k, p in pp.params.items()}
    pp.zero_grads()
    loss = nar_loss(pp, batch, true_ids, mask_flags, dropout_rng=dropout_rng)
    sq = 0.0
    for p in pp.params.values():
        sq += float(np.sum(np.square(p.grad), dtype=np.float64))
    norm = np.sqrt(sq)
    factor = min(1.0, opt.clip / max(norm, 1e-12))
    for k, p in pp.params.items():
        v = opt.velocity[k]
        v *= opt.momentum
        v -= opt.lr * factor * p.grad
        p.value += v
    return loss


def save_predictor(pp: PredictorParams, path, extra_meta: dict[str, str] | None = None) -> None:
    meta = pp.config.to_meta()
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save(path, "predictor", meta,
                    [(k, p.value) for k, p in pp.params.items()])


def load_predictor(path) -> PredictorParams:
    section, meta, tensors = checkpoint.load(path)
    if section != "predictor":
        raise ValueError(f"checkpoint section {section!r} is not a predictor")
    pp = PredictorParams(PredictorConfig.from_meta(meta), Rng(0))
    for k, arr in tensors.items():
        pp.params[k].value[...] = arr
    return pp
