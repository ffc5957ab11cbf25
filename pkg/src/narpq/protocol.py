"""Unified multi-modal token sequences and the training-time sampling rules.

A sequence lays out, in order: visual condition grids separated by SEP, an
EOV terminator, the caption words, an EOT terminator, then the h*w target
cells. Visual slots carry M grouped sub-token indices and 2-D positions
local to their own grid (so conditions are translation-agnostic); text slots
carry a word id and a 1-D position; every slot carries a segment tag.
Target cells fixed by a preservation mask keep their given tokens and are
never maskable.

Training samples draw one of four masking sub-strategies with probability
0.70 / 0.10 / 0.10 / 0.10 (random count, all, inside random boxes, outside
random boxes) and one of four condition combinations with probability
0.20 / 0.55 / 0.20 / 0.05 (visual+text, visual, text, none); visual
conditions are axis-aligned crops of the target grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import TokenGrid
from .numerics import Rng

# slot kinds
KIND_PAD = 0
KIND_SPECIAL = 1
KIND_TEXT = 2
KIND_VISUAL = 3

# segments
SEG_VC = 0
SEG_TC = 1
SEG_TARGET = 2
SEG_PAD = 3

# special token ids (their own embedding family)
SP_MASK = 0
SP_EOV = 1
SP_EOT = 2
SP_SEP = 3
SP_PAD = 4
N_SPECIAL = 5

STRATEGY_RANDOM = "random"
STRATEGY_ALL = "all"
STRATEGY_INSIDE_BOXES = "inside_boxes"
STRATEGY_OUTSIDE_BOXES = "outside_boxes"

COMBO_VISUAL_TEXT = "vt"
COMBO_VISUAL = "v"
COMBO_TEXT = "t"
COMBO_NONE = "none"

STRATEGY_PROBS = ((STRATEGY_RANDOM, 0.70), (STRATEGY_ALL, 0.10),
                  (STRATEGY_INSIDE_BOXES, 0.10), (STRATEGY_OUTSIDE_BOXES, 0.10))
COMBO_PROBS = ((COMBO_VISUAL_TEXT, 0.20), (COMBO_VISUAL, 0.55),
               (COMBO_TEXT, 0.20), (COMBO_NONE, 0.05))


@dataclass(frozen=True)
class Vocabulary:
    """Token id spaces: per-group visual ids, text word ids, special ids.

    Content ids live in family-local ranges; each family reserves its own
    MASK row (visual groups use index k_vocab, text uses index n_words).
    """

    m_groups: int
    k_vocab: int
    words: tuple[str, ...]

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def visual_mask_id(self) -> int:
        return self.k_vocab

    def word_id(self, w: str) -> int:
        return self.words.index(w)


@dataclass
class ConditionSet:
    visuals: list[TokenGrid] = field(default_factory=list)
    text: list[int] = field(default_factory=list)
    preservation: np.ndarray | None = None  # (h, w) bool; True = token is given

    def validate(self, h: int, w: int, max_visuals: int, max_text: int) -> None:
        if len(self.visuals) > max_visuals:
            raise ValueError(f"at most {max_visuals} visual conditions supported")
        if len(self.text) > max_text:
            raise ValueError(f"caption of {len(self.text)} words exceeds the cap of {max_text}")
        if self.preservation is not None and self.preservation.shape != (h, w):
            raise ValueError("preservation mask shape must match the target grid")


@dataclass
class MultiModalSequence:
    """One assembled token sequence plus enough structure to invert it."""

    ids: np.ndarray        # (L, M) int64; text/special use column 0
    kind: np.ndarray       # (L,) int8
    segment: np.ndarray    # (L,) int8
    rows: np.ndarray       # (L,) int64, 0 where not applicable
    cols: np.ndarray       # (L,) int64
    pos1: np.ndarray       # (L,) int64, text positions
    maskable: np.ndarray   # (L,) bool
    target_pos: np.ndarray  # (h*w,) sequence index of each target cell
    preserved: np.ndarray  # (h*w,) bool
    h: int
    w: int
    vc_shapes: list[tuple[int, int]]

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def m_groups(self) -> int:
        return self.ids.shape[1]

    def copy(self) -> "MultiModalSequence":
        return MultiModalSequence(
            self.ids.copy(), self.kind.copy(), self.segment.copy(), self.rows.copy(),
            self.cols.copy(), self.pos1.copy(), self.maskable.copy(),
            self.target_pos.copy(), self.preserved.copy(), self.h, self.w,
            list(self.vc_shapes),
        )

    def target_ids(self) -> np.ndarray:
        """(h*w, M) current target-cell ids (may contain MASK rows)."""
        return self.ids[self.target_pos]

    def set_target_cells(self, flat_cells: np.ndarray, values: np.ndarray) -> None:
        self.ids[self.target_pos[flat_cells]] = values

    def mask_target_cells(self, flat_cells: np.ndarray, mask_id: int) -> None:
        self.ids[self.target_pos[flat_cells]] = mask_id

    def masked_cells(self, mask_id: int) -> np.ndarray:
        """Flat target-cell indices whose slots currently hold MASK."""
        return np.flatnonzero(self.ids[self.target_pos, 0] == mask_id)


def assemble(vocab: Vocabulary, conditions: ConditionSet, target: TokenGrid | None,
             h: int, w: int, mask_free_cells: bool = False,
             max_visuals: int = 2, max_text: int = 16) -> MultiModalSequence:
    """Lay out [VC (SEP VC)*, EOV, text, EOT, target] into one sequence.

    `target` supplies the tokens of target cells; None (or
    mask_free_cells=True) leaves every non-preserved cell as MASK.
    Preservation requires `target` as the source of the preserved tokens.
    """
    conditions.validate(h, w, max_visuals, max_text)
    p = conditions.preservation
    if p is not None and target is None:
        raise ValueError("a preservation mask needs a source grid for its tokens")
    if target is not None and (target.h, target.w) != (h, w):
        raise ValueError(f"target grid {target.h}x{target.w} does not match {h}x{w}")

    m = vocab.m_groups
    ids, kind, segment, rows, cols, pos1, maskable = [], [], [], [], [], [], []

    def push(slot_ids, k, seg, r=0, c=0, p1=0, can_mask=False):
        ids.append(slot_ids)
        kind.append(k)
        segment.append(seg)
        rows.append(r)
        cols.append(c)
        pos1.append(p1)
        maskable.append(can_mask)

    for vi, grid in enumerate(conditions.visuals):
        if vi > 0:
            push([SP_SEP] + [0] * (m - 1), KIND_SPECIAL, SEG_VC)
        if grid.m_groups != m:
            raise ValueError("visual condition group count does not match the vocabulary")
        for r in range(grid.h):
            for c in range(grid.w):
                push(list(grid.indices[r, c]), KIND_VISUAL, SEG_VC, r=r, c=c)
    push([SP_EOV] + [0] * (m - 1), KIND_SPECIAL, SEG_VC)
    for i, wid in enumerate(conditions.text):
        if not 0 <= wid < vocab.n_words:
            raise ValueError(f"word id {wid} out of vocabulary")
        push([wid] + [0] * (m - 1), KIND_TEXT, SEG_TC, p1=i)
    push([SP_EOT] + [0] * (m - 1), KIND_SPECIAL, SEG_TC)

    target_pos = []
    preserved = np.zeros(h * w, dtype=bool)
    mask_row = [vocab.visual_mask_id] * m
    for r in range(h):
        for c in range(w):
            cell = r * w + c
            target_pos.append(len(ids))
            keep = bool(p[r, c]) if p is not None else False
            preserved[cell] = keep
            if keep:
                push(list(target.indices[r, c]), KIND_VISUAL, SEG_TARGET, r=r, c=c)
            elif target is not None and not mask_free_cells:
                push(list(target.indices[r, c]), KIND_VISUAL, SEG_TARGET, r=r, c=c,
                     can_mask=True)
            else:
                push(mask_row, KIND_VISUAL, SEG_TARGET, r=r, c=c, can_mask=True)

    return MultiModalSequence(
        ids=np.array(ids, dtype=np.int64),
        kind=np.array(kind, dtype=np.int8),
        segment=np.array(segment, dtype=np.int8),
        rows=np.array(rows, dtype=np.int64),
        cols=np.array(cols, dtype=np.int64),
        pos1=np.array(pos1, dtype=np.int64),
        maskable=np.array(maskable, dtype=bool),
        target_pos=np.array(target_pos, dtype=np.int64),
        preserved=preserved,
        h=h,
        w=w,
        vc_shapes=[(g.h, g.w) for g in conditions.visuals],
    )


def disassemble(seq: MultiModalSequence, vocab: Vocabulary):
    """Invert assemble: (conditions, target grid, masked-cell set).

    Masked target cells come back as visual_mask_id rows in the grid.
    """
    visuals = []
    cursor = 0
    for (gh, gw) in seq.vc_shapes:
        if visuals:
            cursor += 1  # SEP
        cells = seq.ids[cursor : cursor + gh * gw]
        visuals.append(TokenGrid.unflatten(cells, gh, gw))
        cursor += gh * gw
    cursor += 1  # EOV
    text = []
    while seq.kind[cursor] == KIND_TEXT:
        text.append(int(seq.ids[cursor, 0]))
        cursor += 1
    target = TokenGrid.unflatten(seq.ids[seq.target_pos], seq.h, seq.w)
    preservation = seq.preserved.reshape(seq.h, seq.w).copy() if seq.preserved.any() else None
    masked = seq.masked_cells(vocab.visual_mask_id)
    return ConditionSet(visuals, text, preservation), target, masked


@dataclass
class MaskStrategy:
    kind: str
    count: int = 0  # RANDOM only
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, h, w)

    def validate(self, h: int, w: int) -> None:
        if self.kind == STRATEGY_RANDOM and not 1 <= self.count <= h * w:
            raise ValueError(f"random mask count {self.count} outside [1, {h * w}]")
        for (t, l, bh, bw) in self.boxes:
            if t < 0 or l < 0 or t + bh > h or l + bw > w:
                raise ValueError(f"box {(t, l, bh, bw)} outside the {h}x{w} grid")


def _cells_in_boxes(boxes, h: int, w: int) -> np.ndarray:
    inside = np.zeros((h, w), dtype=bool)
    for (t, l, bh, bw) in boxes:
        inside[t : t + bh, l : l + bw] = True
    return inside.reshape(-1)


def _random_boxes(rng: Rng, h: int, w: int) -> list[tuple[int, int, int, int]]:
    n_boxes = int(rng.integers(1, 4))
    boxes = []
    for _ in range(n_boxes):
        bh = int(rng.integers(2, h))  # sides in [2, h-1]
        bw = int(rng.integers(2, w))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        boxes.append((top, left, bh, bw))
    return boxes


def _pick(rng: Rng, weighted: tuple) -> str:
    u = rng.random()
    acc = 0.0
    for name, prob in weighted:
        acc += prob
        if u < acc:
            return name
    return weighted[-1][0]


def sample_mask_strategy(rng: Rng, h: int, w: int) -> MaskStrategy:
    kind = _pick(rng, STRATEGY_PROBS)
    if kind == STRATEGY_RANDOM:
        return MaskStrategy(kind, count=int(rng.integers(1, h * w + 1)))
    if kind == STRATEGY_ALL:
        return MaskStrategy(kind)
    return MaskStrategy(kind, boxes=_random_boxes(rng, h, w))


def sample_condition_combo(rng: Rng) -> str:
    return _pick(rng, COMBO_PROBS)


def apply_mask(seq: MultiModalSequence, strategy: MaskStrategy, rng: Rng,
               mask_id: int) -> tuple[MultiModalSequence, np.ndarray, np.ndarray]:
    """Mask a subset of maskable target cells; returns (sequence, M, U).

    M and U are flat cell indices partitioning the target grid's non-preserved
    cells plus the preserved set (preserved cells are always in U). A strategy
    that would leave M empty is re-drawn internally.
    """
    strategy.validate(seq.h, seq.w)
    available = np.flatnonzero(~seq.preserved)
    if available.size == 0:
        raise ValueError("no maskable cells: every target cell is preserved")

    for _ in range(100):
        if strategy.kind == STRATEGY_RANDOM:
            n = min(strategy.count, available.size)
            sel = available[np.sort(rng.permutation(available.size)[:n])]
        elif strategy.kind == STRATEGY_ALL:
            sel = available
        else:
            inside = _cells_in_boxes(strategy.boxes, seq.h, seq.w)
            if strategy.kind == STRATEGY_OUTSIDE_BOXES:
                inside = ~inside
            sel = available[inside[available]]
        if sel.size > 0:
            break
        strategy = MaskStrategy(strategy.kind, boxes=_random_boxes(rng, seq.h, seq.w))
    else:
        sel = available  # every redraw degenerate; fall back to masking all

    out = seq.copy()
    out.mask_target_cells(sel, mask_id)
    m_set = sel
    u_set = np.setdiff1d(np.arange(seq.h * seq.w), m_set)
    return out, m_set, u_set


def crop_conditions(rng: Rng, grid: TokenGrid, n_crops: int) -> list[TokenGrid]:
    """Axis-aligned sub-rectangles of the target grid, sides in [2, h] x [2, w]."""
    crops = []
    for _ in range(n_crops):
        ch = int(rng.integers(2, grid.h + 1))
        cw = int(rng.integers(2, grid.w + 1))
        top = int(rng.integers(0, grid.h - ch + 1))
        left = int(rng.integers(0, grid.w - cw + 1))
        crops.append(grid.crop(top, left, ch, cw))
    return crops


def make_training_example(rng: Rng, vocab: Vocabulary, grid: TokenGrid,
                          text_ids: list[int], max_text: int = 16):
    """One training sequence: sampled condition combo + masking strategy.

    Returns (masked sequence, true target ids (h*w, M), masked cell flags).
    """
    combo = sample_condition_combo(rng)
    visuals: list[TokenGrid] = []
    text: list[int] = []
    if combo in (COMBO_VISUAL_TEXT, COMBO_VISUAL):
        visuals = crop_conditions(rng, grid, int(rng.integers(1, 3)))
    if combo in (COMBO_VISUAL_TEXT, COMBO_TEXT):
        text = list(text_ids)
    cond = ConditionSet(visuals=visuals, text=text)
    seq = assemble(vocab, cond, grid, grid.h, grid.w, max_text=max_text)
    strategy = sample_mask_strategy(rng, grid.h, grid.w)
    masked_seq, m_set, _ = apply_mask(seq, strategy, rng, vocab.visual_mask_id)
    mask_flags = np.zeros(grid.h * grid.w, dtype=bool)
    mask_flags[m_set] = True
    return masked_seq, grid.flatten(), mask_flags
