import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narpq import protocol as pr
from narpq.codec import TokenGrid
from narpq.numerics import Rng

VOCAB = pr.Vocabulary(m_groups=2, k_vocab=8, words=tuple("abcdefghijkl"))


def rand_grid(seed, h=8, w=8, m=2, k=8):
    return TokenGrid(Rng(seed).integers(0, k, size=(h, w, m)))


class TestAssemble:
    def test_no_conditions_fully_masked_length(self):
        seq = pr.assemble(VOCAB, pr.ConditionSet(), None, 8, 8)
        assert len(seq) == 66  # EOV + EOT + 64 cells
        assert seq.kind[0] == pr.KIND_SPECIAL and seq.ids[0, 0] == pr.SP_EOV
        assert seq.ids[1, 0] == pr.SP_EOT
        assert np.all(seq.ids[seq.target_pos, 0] == VOCAB.visual_mask_id)

    def test_two_visuals_with_separator(self):
        g = rand_grid(1, 4, 4)
        seq = pr.assemble(VOCAB, pr.ConditionSet(visuals=[g, g]), None, 8, 8)
        # 16 VC + SEP + 16 VC + EOV + EOT + 64 targets
        assert len(seq) == 16 + 1 + 16 + 1 + 1 + 64
        assert seq.ids[16, 0] == pr.SP_SEP
        assert seq.kind[16] == pr.KIND_SPECIAL

    def test_full_preservation_copies_grid_verbatim(self):
        g = rand_grid(2)
        p = np.ones((8, 8), dtype=bool)
        seq = pr.assemble(VOCAB, pr.ConditionSet(preservation=p), g, 8, 8,
                          mask_free_cells=True)
        assert np.array_equal(seq.target_ids(), g.flatten())
        assert seq.masked_cells(VOCAB.visual_mask_id).size == 0
        assert not seq.maskable[seq.target_pos].any()

    def test_preservation_needs_source(self):
        p = np.ones((8, 8), dtype=bool)
        with pytest.raises(ValueError):
            pr.assemble(VOCAB, pr.ConditionSet(preservation=p), None, 8, 8)

    def test_oversize_text_rejected(self):
        with pytest.raises(ValueError):
            pr.assemble(VOCAB, pr.ConditionSet(text=[0] * 40), None, 8, 8, max_text=16)

    def test_layout_order(self):
        g = rand_grid(3, 2, 3)
        seq = pr.assemble(VOCAB, pr.ConditionSet(visuals=[g], text=[1, 2]), None, 8, 8)
        kinds = list(seq.kind[: 6 + 1 + 2 + 1])
        assert kinds == [pr.KIND_VISUAL] * 6 + [pr.KIND_SPECIAL] + \
            [pr.KIND_TEXT] * 2 + [pr.KIND_SPECIAL]
        segs = set(seq.segment[seq.target_pos])
        assert segs == {pr.SEG_TARGET}

    def test_local_coordinates_for_crops(self):
        g = rand_grid(4)
        crop = g.crop(3, 5, 2, 2)
        seq = pr.assemble(VOCAB, pr.ConditionSet(visuals=[crop]), None, 8, 8)
        assert list(seq.rows[:4]) == [0, 0, 1, 1]
        assert list(seq.cols[:4]) == [0, 1, 0, 1]


class TestRoundTrip:
    def test_disassemble_recovers_everything(self):
        g = rand_grid(5)
        crops = [g.crop(0, 0, 3, 2), g.crop(2, 2, 4, 4)]
        text = [3, 1, 4]
        p = np.zeros((8, 8), dtype=bool)
        p[0, :] = True
        seq = pr.assemble(VOCAB, pr.ConditionSet(crops, text, p), g, 8, 8)
        masked_seq, m_set, _ = pr.apply_mask(
            seq, pr.MaskStrategy(pr.STRATEGY_RANDOM, count=10), Rng(1),
            VOCAB.visual_mask_id)
        cond, target, masked = pr.disassemble(masked_seq, VOCAB)
        assert [g2.indices.tolist() for g2 in cond.visuals] == \
            [c.indices.tolist() for c in crops]
        assert cond.text == text
        assert np.array_equal(cond.preservation, p)
        assert np.array_equal(np.sort(masked), np.sort(m_set))
        unmasked = np.setdiff1d(np.arange(64), m_set)
        assert np.array_equal(target.flatten()[unmasked], g.flatten()[unmasked])


class TestMasking:
    def test_all_strategy_masks_everything(self):
        g = rand_grid(6)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        masked, m, u = pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_ALL), Rng(2),
                                     VOCAB.visual_mask_id)
        assert m.size == 64 and u.size == 0

    def test_random_one(self):
        g = rand_grid(7)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        masked, m, u = pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_RANDOM, count=1),
                                     Rng(3), VOCAB.visual_mask_id)
        assert m.size == 1 and u.size == 63
        assert masked.masked_cells(VOCAB.visual_mask_id).size == 1

    def test_inside_full_grid_box_equals_all(self):
        g = rand_grid(8)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        _, m_box, _ = pr.apply_mask(
            seq, pr.MaskStrategy(pr.STRATEGY_INSIDE_BOXES, boxes=[(0, 0, 8, 8)]),
            Rng(4), VOCAB.visual_mask_id)
        _, m_all, _ = pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_ALL), Rng(4),
                                    VOCAB.visual_mask_id)
        assert np.array_equal(np.sort(m_box), np.sort(m_all))

    def test_degenerate_outside_box_triggers_redraw(self):
        g = rand_grid(9)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        strat = pr.MaskStrategy(pr.STRATEGY_OUTSIDE_BOXES, boxes=[(0, 0, 8, 8)])
        _, m, _ = pr.apply_mask(seq, strat, Rng(5), VOCAB.visual_mask_id)
        assert m.size > 0  # re-drawn internally, never empty

    def test_preserved_cells_never_masked(self):
        g = rand_grid(10)
        p = np.zeros((8, 8), dtype=bool)
        p[::2, ::2] = True
        seq = pr.assemble(VOCAB, pr.ConditionSet(preservation=p), g, 8, 8)
        flat_p = p.reshape(-1)
        for seed in range(30):
            strat = pr.sample_mask_strategy(Rng(seed), 8, 8)
            _, m, u = pr.apply_mask(seq, strat, Rng(seed + 1000), VOCAB.visual_mask_id)
            assert not flat_p[m].any()
            assert np.array_equal(np.sort(np.concatenate([m, u])), np.arange(64))

    def test_fully_preserved_rejected(self):
        g = rand_grid(11)
        p = np.ones((8, 8), dtype=bool)
        seq = pr.assemble(VOCAB, pr.ConditionSet(preservation=p), g, 8, 8)
        with pytest.raises(ValueError):
            pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_ALL), Rng(0),
                          VOCAB.visual_mask_id)

    def test_box_bounds_validated(self):
        g = rand_grid(12)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        with pytest.raises(ValueError):
            pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_INSIDE_BOXES,
                                               boxes=[(5, 5, 4, 4)]),
                          Rng(0), VOCAB.visual_mask_id)

    @given(st.integers(0, 2**31), st.integers(1, 64))
    @settings(max_examples=50, deadline=None)
    def test_partition_invariant(self, seed, count):
        g = rand_grid(13)
        seq = pr.assemble(VOCAB, pr.ConditionSet(), g, 8, 8)
        _, m, u = pr.apply_mask(seq, pr.MaskStrategy(pr.STRATEGY_RANDOM, count=count),
                                Rng(seed), VOCAB.visual_mask_id)
        assert np.intersect1d(m, u).size == 0
        assert np.array_equal(np.sort(np.concatenate([m, u])), np.arange(64))


class TestSampling:
    def test_strategy_determinism(self):
        a = [pr.sample_mask_strategy(Rng(42), 8, 8).kind for _ in range(1)]
        b = [pr.sample_mask_strategy(Rng(42), 8, 8).kind for _ in range(1)]
        assert a == b

    def test_strategy_frequencies_quick(self):
        rng = Rng(0)
        counts = {k: 0 for k, _ in pr.STRATEGY_PROBS}
        n = 20_000
        for _ in range(n):
            counts[pr.sample_mask_strategy(rng, 8, 8).kind] += 1
        for kind, p in pr.STRATEGY_PROBS:
            assert counts[kind] / n == pytest.approx(p, abs=0.015)

    def test_combo_frequencies_quick(self):
        rng = Rng(1)
        counts = {k: 0 for k, _ in pr.COMBO_PROBS}
        n = 20_000
        for _ in range(n):
            counts[pr.sample_condition_combo(rng)] += 1
        for combo, p in pr.COMBO_PROBS:
            assert counts[combo] / n == pytest.approx(p, abs=0.015)

    def test_box_sides_within_bounds(self):
        rng = Rng(2)
        for _ in range(300):
            strat = pr.sample_mask_strategy(rng, 8, 8)
            for (t, l, bh, bw) in strat.boxes:
                assert 2 <= bh <= 7 and 2 <= bw <= 7
                assert 0 <= t <= 8 - bh and 0 <= l <= 8 - bw

    def test_crops_are_verbatim_subrectangles(self):
        g = rand_grid(14)
        rng = Rng(3)
        for _ in range(50):
            crops = pr.crop_conditions(rng, g, 2)
            for c in crops:
                found = False
                for top in range(g.h - c.h + 1):
                    for left in range(g.w - c.w + 1):
                        if np.array_equal(g.indices[top : top + c.h, left : left + c.w],
                                          c.indices):
                            found = True
                assert found

    def test_training_example_mask_nonempty(self):
        g = rand_grid(15)
        cap = [0, 1, 2]
        for seed in range(40):
            seq, true_ids, flags = pr.make_training_example(Rng(seed), VOCAB, g, cap)
            assert flags.any()
            assert true_ids.shape == (64, 2)
            masked_slots = seq.masked_cells(VOCAB.visual_mask_id)
            assert np.array_equal(np.sort(masked_slots), np.flatnonzero(flags))
