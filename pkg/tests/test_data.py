import numpy as np
import pytest

from narpq import data
from narpq.numerics import Rng


class TestSpecsAndCaptions:
    def test_forty_valid_specs(self):
        specs = data.all_specs()
        assert len(specs) == 40
        assert len(set(specs)) == 40

    def test_caption_templates(self):
        assert data.caption(data.AttributeSpec("red", "solid")) == \
            ["a", "red", "solid", "garment"]
        assert data.caption(data.AttributeSpec("blue", "stripes", "yellow")) == \
            ["a", "blue", "stripes", "garment", "with", "yellow", "accents"]

    def test_caption_roundtrip_all_specs(self):
        for spec in data.all_specs():
            assert data.parse_caption(data.caption(spec)) == spec

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            data.AttributeSpec("red", "solid", "blue")
        with pytest.raises(ValueError):
            data.AttributeSpec("red", "stripes", "red")
        with pytest.raises(ValueError):
            data.AttributeSpec("red", "stripes")

    def test_vocabulary_is_closed_and_small(self):
        assert len(data.VOCAB_WORDS) <= 20
        for spec in data.all_specs():
            assert all(w in data.WORD_IDS for w in data.caption(spec))


class TestOracle:
    def test_identity_on_clean_renders(self):
        for spec in data.all_specs():
            assert data.attribute_oracle(data.render(spec)) == spec

    def test_identity_under_jitter(self):
        for spec in data.all_specs():
            for seed in range(3):
                assert data.attribute_oracle(data.render(spec, Rng(seed))) == spec

    def test_mid_gray_fallback_is_solid(self):
        est = data.attribute_oracle(np.full((32, 32, 3), 0.5))
        assert est.pattern == "solid"
        assert est.base_color in data.COLORS

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            data.attribute_oracle(np.zeros((16, 16, 3)))


class TestGeneration:
    def test_exhaustive_sweep_covers_every_spec_once(self):
        samples = data.generate_dataset(40, Rng(0), exhaustive=True, jitter=False)
        seen = {s.spec for s in samples}
        assert seen == set(data.all_specs())

    def test_deterministic_manifest(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        data.generate_dataset(25, Rng(77), out_dir=str(d1))
        data.generate_dataset(25, Rng(77), out_dir=str(d2))
        m1 = (d1 / "manifest.tsv").read_bytes()
        assert m1 == (d2 / "manifest.tsv").read_bytes()
        for f in sorted(d1.iterdir()):
            assert f.read_bytes() == (d2 / f.name).read_bytes()

    def test_uniform_color_marginals(self):
        rng = Rng(5)
        n = 20_000
        counts = {c: 0 for c in data.COLORS}
        for _ in range(n):
            counts[data.random_spec(rng).base_color] += 1
        for c in data.COLORS:
            assert counts[c] / n == pytest.approx(0.25, abs=0.015)

    def test_caption_matches_rendered_attributes(self):
        for s in data.generate_dataset(60, Rng(8)):
            assert data.parse_caption(s.caption) == s.spec
            assert data.attribute_oracle(s.image) == s.spec

    def test_manifest_loads_back(self, tmp_path):
        data.generate_dataset(10, Rng(3), out_dir=str(tmp_path / "ds"))
        records = data.load_manifest(str(tmp_path / "ds" / "manifest.tsv"))
        assert len(records) == 10
        img = data.read_ppm(str(tmp_path / "ds" / records[0][0]))
        assert img.shape == (32, 32, 3)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            data.generate_dataset(0, Rng(0))


class TestPpm:
    def test_roundtrip_within_quantization(self, tmp_path):
        img = data.render(data.AttributeSpec("green", "checker", "red"), Rng(4))
        p = tmp_path / "img.ppm"
        data.write_ppm(str(p), img, comment="cfg=1 seed=2")
        back = data.read_ppm(str(p))
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-6

    def test_second_write_is_byte_identical(self, tmp_path):
        img = data.render(data.AttributeSpec("yellow", "dots", "blue"), Rng(6))
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        data.write_ppm(str(p1), img, comment="x=1")
        data.write_ppm(str(p2), data.read_ppm(str(p1)), comment="x=1")
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_non_ppm(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"JUNKDATA")
        with pytest.raises(ValueError):
            data.read_ppm(str(p))

    def test_pixels_stay_in_range(self):
        img = data.render(data.AttributeSpec("blue", "stripes", "green"), Rng(1))
        assert img.min() >= 0.0 and img.max() <= 1.0
