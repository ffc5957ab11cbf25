"""Dataset-to-model training orchestration for the token predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec as codec_mod
from . import data as data_mod
from . import predictor as pred_mod
from . import protocol
from .numerics import Rng


def build_vocab(codec_config: codec_mod.CodecConfig) -> protocol.Vocabulary:
    return protocol.Vocabulary(
        m_groups=codec_config.m_groups,
        k_vocab=codec_config.k_codewords,
        words=data_mod.VOCAB_WORDS,
    )


def predictor_config_for(codec_config: codec_mod.CodecConfig,
                         layers: int = 4, hidden: int = 128, heads: int = 4,
                         ffn: int = 256, max_seq: int = 256, dropout: float = 0.0,
                         max_text: int = 16) -> pred_mod.PredictorConfig:
    """Predictor sized to the codec's token space."""
    return pred_mod.PredictorConfig(
        layers=layers, hidden=hidden, heads=heads, ffn=ffn,
        m_groups=codec_config.m_groups, k_vocab=codec_config.k_codewords,
        n_words=len(data_mod.VOCAB_WORDS), max_seq=max_seq, dropout=dropout,
        grid_h=codec_config.grid, grid_w=codec_config.grid, max_text=max_text,
    )


def tokenize_dataset(cp: codec_mod.CodecParams, samples: list[data_mod.ToySample]):
    """Precompute (token grid, caption word ids) for every sample."""
    grids = []
    caps = []
    for s in samples:
        grids.append(codec_mod.encode(cp, s.image))
        caps.append(data_mod.caption_ids(s.caption))
    return grids, caps


@dataclass
class NarTrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 0.3
    momentum: float = 0.9
    clip: float = 1.0
    log_every: int = 200


def train_predictor(grids, caps, config: pred_mod.PredictorConfig,
                    vocab: protocol.Vocabulary, rng: Rng,
                    train: NarTrainConfig | None = None,
                    log: list | None = None) -> pred_mod.PredictorParams:
    """Masked-token training over sampled condition combos and mask strategies."""
    train = train or NarTrainConfig()
    pp = pred_mod.PredictorParams(config, rng)
    opt = pred_mod.SgdState(lr=train.lr, momentum=train.momentum, clip=train.clip)
    n = len(grids)
    t_cells = config.grid_h * config.grid_w
    running = None
    for step in range(train.steps):
        picks = rng.integers(0, n, size=train.batch)
        seqs, true_rows, flag_rows = [], [], []
        for i in picks:
            seq, true_ids, flags = protocol.make_training_example(
                rng, vocab, grids[i], caps[i], max_text=config.max_text)
            seqs.append(seq)
            true_rows.append(true_ids)
            flag_rows.append(flags)
        batch = pred_mod.make_batch(seqs)
        true = np.stack(true_rows).reshape(train.batch, t_cells, config.m_groups)
        flags = np.stack(flag_rows)
        loss = pred_mod.train_step(pp, batch, true, flags, opt)
        running = loss if running is None else 0.98 * running + 0.02 * loss
        if log is not None and (step % train.log_every == 0 or step == train.steps - 1):
            log.append({"step": step, "loss": loss, "loss_ema": running})
    return pp


def masked_token_accuracy(pp: pred_mod.PredictorParams, vocab: protocol.Vocabulary,
                          grids, caps, rng: Rng, n_eval: int = 32,
                          copy_conditions: bool = False) -> float:
    """Fraction of fully-masked target sub-tokens recovered by argmax.

    copy_conditions=True feeds the target grid itself as the visual condition
    (the pure copy task); otherwise the caption is the condition.
    """
    hits = 0
    total = 0
    for _ in range(n_eval):
        i = int(rng.integers(0, len(grids)))
        grid = grids[i]
        cond = protocol.ConditionSet(
            visuals=[grid.copy()] if copy_conditions else [],
            text=[] if copy_conditions else list(caps[i]),
        )
        seq = protocol.assemble(vocab, cond, None, grid.h, grid.w,
                                max_text=pp.config.max_text)
        batch = pred_mod.make_batch([seq])
        logits, _ = pred_mod.forward(pp, batch)
        pred = logits[0].argmax(axis=-1)  # (T, M)
        hits += int((pred == grid.flatten()).sum())
        total += pred.size
    return hits / total
