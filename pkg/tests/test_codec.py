import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narpq import codec, data
from narpq.numerics import Rng, grad_check


@pytest.fixture(scope="module")
def tiny_cfg():
    return codec.CodecConfig(image_size=8, patch=4, n_z=4, m_groups=2, k_codewords=3, hidden=6)


@pytest.fixture(scope="module")
def tiny_images():
    imgs = [
        data.render(data.AttributeSpec("red", "solid"))[:8, :8],
        data.render(data.AttributeSpec("blue", "dots", "yellow"))[:8, :8],
        data.render(data.AttributeSpec("green", "stripes", "red"))[:8, :8],
    ]
    return np.stack(imgs)


class TestTokenGrid:
    def test_flatten_unflatten_bijection(self):
        g = codec.TokenGrid(Rng(1).integers(0, 9, size=(5, 3, 2)))
        back = codec.TokenGrid.unflatten(g.flatten(), 5, 3)
        assert np.array_equal(back.indices, g.indices)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_bijection_property(self, h, w, m, seed):
        g = codec.TokenGrid(Rng(seed).integers(0, 100, size=(h, w, m)))
        assert np.array_equal(codec.TokenGrid.unflatten(g.flatten(), h, w).indices, g.indices)

    def test_crop_bounds(self):
        g = codec.TokenGrid(np.zeros((4, 4, 2), dtype=np.int64))
        with pytest.raises(ValueError):
            g.crop(2, 2, 3, 1)


class TestPatchify:
    def test_roundtrip(self):
        imgs = Rng(2).normal(1.0, (3, 8, 8, 3))
        flat = codec.patchify(imgs, 4)
        assert flat.shape == (3 * 4, 48)
        back = codec.unpatchify(flat, 3, 2, 4)
        assert np.array_equal(back, imgs)


class TestLossAndGrads:
    def test_grad_check_full_objective(self, tiny_cfg, tiny_images):
        cp = codec.CodecParams(tiny_cfg, Rng(11))
        frozen = codec.capture_st_state(cp, tiny_images)

        def f():
            cp.zero_grads()
            loss, _ = codec.codec_loss(cp, tiny_images, st_frozen=frozen)
            return loss

        assert grad_check(f, cp.all_params(), eps=1e-3) < 1e-3

    def test_straight_through_copies_decoder_gradient(self, tiny_cfg, tiny_images):
        cp = codec.CodecParams(tiny_cfg, Rng(12))
        d_enc, d_dec = codec.straight_through_grads(cp, tiny_images)
        assert np.array_equal(d_enc, d_dec)

    def test_middle_and_commit_terms_equal_value(self, tiny_cfg, tiny_images):
        cp = codec.CodecParams(tiny_cfg, Rng(13))
        _, stats = codec.codec_loss(cp, tiny_images)
        assert stats["term_codebook"] == pytest.approx(stats["term_commit"], rel=1e-6)

    def test_terms_route_gradients_to_disjoint_params(self, tiny_cfg, tiny_images):
        cp = codec.CodecParams(tiny_cfg, Rng(14))
        # zero the reconstruction influence by matching decoder output exactly?
        # instead: check the codebook gets gradient only from the middle term by
        # comparing against a manual middle-term-only backward
        cp.zero_grads()
        codec.codec_loss(cp, tiny_images)
        cb_grads = [cp.params[f"cb_{m}"].grad.copy() for m in range(tiny_cfg.m_groups)]
        z = codec.encode_latents(cp, tiny_images).reshape(-1, tiny_cfg.n_z)
        from narpq import quantizers
        idx, _ = quantizers.quantize_batch(cp.codebook, z)
        zq = quantizers.dequantize_batch(cp.codebook, idx)
        dzq = 2.0 / zq.size * (zq - z)
        sub = tiny_cfg.n_z // tiny_cfg.m_groups
        for m in range(tiny_cfg.m_groups):
            manual = np.zeros_like(cb_grads[m])
            np.add.at(manual, idx[:, m], dzq[:, m * sub : (m + 1) * sub])
            np.testing.assert_allclose(cb_grads[m], manual, atol=1e-7)

    def test_zero_loss_when_latents_are_codewords(self, tiny_cfg):
        # one constant image, overfit so reconstruction and quantization vanish
        img = data.render(data.AttributeSpec("red", "solid"))[:8, :8]
        cp = codec.train_codec(img[None], tiny_cfg, Rng(3),
                               codec.CodecTrainConfig(steps=400, batch=1, lr=0.2))
        loss, stats = codec.codec_loss(cp, img[None])
        assert loss < 1e-3


class TestEncodeDecode:
    @pytest.fixture(scope="class")
    def trained(self, tiny_cfg, tiny_images):
        return codec.train_codec(tiny_images, tiny_cfg, Rng(5),
                                 codec.CodecTrainConfig(steps=300, batch=3, lr=0.2))

    def test_decode_is_pure(self, trained, tiny_images):
        tokens = codec.encode(trained, tiny_images[0])
        a = codec.decode(trained, tokens)
        b = codec.decode(trained, tokens)
        assert np.array_equal(a, b)

    def test_decode_pixels_in_range(self, trained, tiny_images):
        for img in tiny_images:
            out = codec.decode(trained, codec.encode(trained, img))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_encode_shape(self, trained, tiny_images):
        tokens = codec.encode(trained, tiny_images[0])
        assert tokens.indices.shape == (2, 2, 2)

    def test_encode_rejects_wrong_size(self, trained):
        with pytest.raises(ValueError):
            codec.encode(trained, np.zeros((16, 16, 3)))

    def test_decode_rejects_bad_indices(self, trained):
        bad = codec.TokenGrid(np.full((2, 2, 2), 99, dtype=np.int64))
        with pytest.raises(IndexError):
            codec.decode(trained, bad)

    def test_token_fixpoint_on_training_images(self, trained, tiny_images):
        agree = total = 0
        for img in tiny_images:
            t1 = codec.encode(trained, img)
            t2 = codec.encode(trained, codec.decode(trained, t1))
            agree += int((t1.indices == t2.indices).sum())
            total += t1.indices.size
        assert agree / total >= 0.5  # tiny codec; the desk-scale bound lives in acceptance


class TestTraining:
    def test_overfit_single_image(self, tiny_cfg):
        img = data.render(data.AttributeSpec("yellow", "checker", "blue"))[:8, :8]
        cp = codec.train_codec(img[None], tiny_cfg, Rng(1),
                               codec.CodecTrainConfig(steps=500, batch=1, lr=0.2))
        assert codec.reconstruction_mse(cp, img[None]) < 1e-3

    def test_loss_decreases(self, tiny_cfg, tiny_images):
        cp = codec.train_codec(tiny_images, tiny_cfg, Rng(2),
                               codec.CodecTrainConfig(steps=200, batch=3, lr=0.1,
                                                      log_every=50))
        assert cp.train_log[-1]["recon_mse"] < cp.train_log[0]["recon_mse"]

    def test_empty_dataset_rejected(self, tiny_cfg):
        with pytest.raises(ValueError):
            codec.train_codec(np.empty((0, 8, 8, 3)), tiny_cfg, Rng(0))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tiny_cfg, tiny_images, tmp_path):
        cp = codec.train_codec(tiny_images, tiny_cfg, Rng(6),
                               codec.CodecTrainConfig(steps=50, batch=3, lr=0.1))
        p1 = tmp_path / "c1.ckpt"
        codec.save_codec(cp, p1, {"seed": "6"})
        back = codec.load_codec(p1)
        assert back.config == cp.config
        for k in cp.params:
            assert np.array_equal(back.params[k].value, cp.params[k].value)
        p2 = tmp_path / "c2.ckpt"
        codec.save_codec(back, p2, {"seed": "6"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_wrong_section_rejected(self, tmp_path):
        from narpq import checkpoint
        checkpoint.save(tmp_path / "x.ckpt", "predictor", {}, [("w", np.zeros(3))])
        with pytest.raises(ValueError):
            codec.load_codec(tmp_path / "x.ckpt")
