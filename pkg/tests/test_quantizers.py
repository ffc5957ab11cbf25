import numpy as np
import pytest

from narpq import quantizers as Q
from narpq.numerics import Rng


def gaussian_mixture_subspaces(seed=0, n=4000, m_groups=2, d=4, comps=4, spread=4.0, sigma=0.1):
    """Well-separated mixture per subspace; returns (vectors, per-group means)."""
    rng = Rng(seed)
    parts, all_means = [], []
    for _ in range(m_groups):
        means = rng.uniform(-spread, spread, size=(comps, d))
        which = rng.integers(0, comps, size=n)
        parts.append((means[which] + rng.normal(sigma, size=(n, d))).astype(np.float32))
        all_means.append(means)
    return np.concatenate(parts, axis=1), all_means


class TestTraining:
    def test_exact_fit_when_n_equals_k(self):
        rng = Rng(1)
        vectors = rng.normal(2.0, (6, 4))
        cb = Q.train_pq(vectors, 1, 6, 20, Rng(2))
        assert Q.distortion(cb, vectors) < 1e-8

    def test_m1_equals_plain_vq(self):
        vectors = Rng(3).normal(1.0, (100, 6))
        a = Q.train_pq(vectors, 1, 8, 15, Rng(5))
        b = Q.train_vq(vectors, 8, 15, Rng(5))
        assert np.array_equal(a.subs[0].codewords, b.subs[0].codewords)

    def test_recovers_mixture_means(self):
        vectors, means = gaussian_mixture_subspaces(seed=11)
        cb = Q.train_pq(vectors, 2, 4, 30, Rng(7))
        for sub, true_means in zip(cb.subs, means):
            for mu in true_means:
                d = np.square(sub.codewords - mu).sum(axis=1).min()
                assert np.sqrt(d) < 0.05

    def test_monotone_distortion_across_seeds(self):
        vectors, _ = gaussian_mixture_subspaces(seed=4, n=1500)
        for seed in range(8):
            cb = Q.train_pq(vectors, 2, 8, 20, Rng(seed))
            for hist in cb.train_history:
                for a, b in zip(hist, hist[1:]):
                    assert b <= a + 1e-9

    def test_degenerate_identical_vectors(self):
        vectors = np.tile(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32), (50, 1))
        cb = Q.train_vq(vectors, 4, 10, Rng(2))
        np.testing.assert_allclose(cb.subs[0].codewords[0], vectors[0], atol=1e-5)
        # remaining codewords jittered apart, none identical
        cw = cb.subs[0].codewords
        for i in range(4):
            for j in range(i + 1, 4):
                assert not np.array_equal(cw[i], cw[j])

    def test_n_smaller_than_k_rejected(self):
        with pytest.raises(ValueError):
            Q.train_vq(Rng(0).normal(1.0, (3, 4)), 8, 5, Rng(1))


class TestQuantize:
    @pytest.fixture()
    def cb(self):
        vectors, _ = gaussian_mixture_subspaces(seed=8, n=1000)
        return Q.train_pq(vectors, 2, 4, 20, Rng(3))

    def test_codeword_concat_roundtrip(self, cb):
        z = np.concatenate([cb.subs[0].codewords[2], cb.subs[1].codewords[1]])
        res = Q.quantize(cb, z)
        assert list(res.indices) == [2, 1]
        assert res.sq_err < 1e-10
        np.testing.assert_array_equal(res.z_q, z)

    def test_quantize_dequantize_idempotent(self, cb):
        for i in range(cb.K):
            for j in range(cb.K):
                z = Q.dequantize(cb, [i, j])
                assert list(Q.quantize(cb, z).indices) == [i, j]

    def test_matches_exhaustive_composite_search(self, cb):
        rng = Rng(14)
        z = rng.normal(3.0, (64, cb.n_z))
        idx, _ = Q.quantize_batch(cb, z)
        # brute force over all K^M composites
        composites = np.stack([Q.dequantize(cb, (i, j))
                               for i in range(cb.K) for j in range(cb.K)])
        d2 = np.square(z[:, None, :] - composites[None]).sum(axis=2)
        best = d2.argmin(axis=1)
        flat = idx[:, 0] * cb.K + idx[:, 1]
        assert np.array_equal(flat, best)

    def test_error_equals_independent_recomputation(self, cb):
        rng = Rng(15)
        z = rng.normal(2.0, (32, cb.n_z))
        idx, err = Q.quantize_batch(cb, z)
        recon = Q.dequantize_batch(cb, idx)
        np.testing.assert_allclose(err, np.square(z - recon).sum(axis=1), rtol=1e-4)

    def test_additivity_of_group_errors(self, cb):
        z = Rng(16).normal(2.0, (16, cb.n_z))
        _, err = Q.quantize_batch(cb, z)
        per_group = 0.0
        for m, sub in enumerate(cb.subs):
            part = z[:, m * sub.dim : (m + 1) * sub.dim]
            d2 = np.square(part[:, None, :] - sub.codewords[None]).sum(axis=2)
            per_group = per_group + d2.min(axis=1)
        np.testing.assert_allclose(err, per_group, atol=1e-6, rtol=1e-5)

    def test_shape_validation(self, cb):
        with pytest.raises(ValueError):
            Q.quantize(cb, np.zeros(cb.n_z + 1))
        with pytest.raises(IndexError):
            Q.dequantize(cb, [0, cb.K])


class TestResidual:
    def test_one_level_equals_vq(self):
        vectors = Rng(21).normal(1.0, (200, 8))
        rq = Q.train_rq(vectors, 1, 8, 15, Rng(9))
        vq = Q.train_vq(vectors, 8, 15, Rng(9))
        assert np.array_equal(rq.levels[0].codewords, vq.subs[0].codewords)

    def test_distortion_non_increasing_in_levels(self):
        vectors = Rng(22).normal(1.5, (2000, 8))
        prev = None
        for levels in (1, 2, 3):
            rq = Q.train_rq(vectors, levels, 16, 15, Rng(10))
            d = Q.distortion(rq, vectors)
            if prev is not None:
                assert d <= prev + 1e-9
            prev = d

    def test_decode_is_sum_of_levels(self):
        vectors = Rng(23).normal(1.0, (300, 6))
        rq = Q.train_rq(vectors, 2, 4, 10, Rng(11))
        idx, _ = Q.rq_quantize_batch(rq, vectors[:5])
        manual = rq.levels[0].codewords[idx[:, 0]] + rq.levels[1].codewords[idx[:, 1]]
        np.testing.assert_array_equal(Q.rq_dequantize_batch(rq, idx), manual)


def test_pq_beats_vq_on_subspace_structured_data():
    vectors, _ = gaussian_mixture_subspaces(seed=0, n=5000, m_groups=4, d=4, comps=6)
    pq = Q.train_pq(vectors, 4, 16, 20, Rng(1))
    vq = Q.train_vq(vectors, 16, 20, Rng(1))
    assert Q.distortion(pq, vectors) < Q.distortion(vq, vectors)


def test_distortion_input_validation():
    cb = Q.train_vq(Rng(1).normal(1.0, (20, 4)), 4, 5, Rng(2))
    with pytest.raises(ValueError):
        Q.distortion(cb, np.empty((0, 4)))


def test_codebook_file_roundtrip(tmp_path):
    vectors, _ = gaussian_mixture_subspaces(seed=5, n=500)
    cb = Q.train_pq(vectors, 2, 4, 10, Rng(6))
    path = tmp_path / "book.pqcb"
    Q.save_codebook(cb, path)
    back = Q.load_codebook(path)
    assert back.M == cb.M and back.K == cb.K and back.n_z == cb.n_z
    for a, b in zip(cb.subs, back.subs):
        assert np.array_equal(a.codewords, b.codewords)
    # bit-exact second write
    path2 = tmp_path / "book2.pqcb"
    Q.save_codebook(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_codebook_file_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.pqcb"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        Q.load_codebook(p)
