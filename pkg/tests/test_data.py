import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zerocon import rng
from zerocon.data import (
    COLORS,
    MANIFEST_NAME,
    CaptionedImageSet,
    ShapeLabel,
    all_labels,
    describe,
    image_key,
    load_png,
    make_toy_dataset,
    parse_caption,
    render,
    save_png,
)


class TestGrammar:
    def test_caption(self):
        assert ShapeLabel("red", "circle", "white").caption() == "a red circle on a white background"
        assert ShapeLabel("blue", "square", "striped", "small").caption() == "a small blue square on a striped background"

    def test_label_count(self):
        labels = all_labels()
        assert len(labels) == 216 and len(set(labels)) == 216

    def test_parse_inverts_caption(self):
        for label in all_labels():
            assert parse_caption(label.caption()) == label

    @pytest.mark.parametrize("text", ["a dog", "the red circle on a white background", "a red circle on a white wall"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_caption(text)

    def test_unknown_attribute(self):
        with pytest.raises(ValueError, match="color"):
            ShapeLabel("teal", "circle", "white")


class TestRender:
    def test_colors_and_mask(self):
        img, mask = render(ShapeLabel("green", "square", "black"))
        assert img.dtype == np.uint8 and img.shape == (32, 32, 3)
        assert (img[mask] == COLORS["green"]).all()
        assert (img[~mask] == (20, 20, 20)).all()

    def test_sizes_ordered(self):
        areas = [render(ShapeLabel("red", "circle", "white", m))[1].sum() for m in ("small", "", "large")]
        assert areas[0] < areas[1] < areas[2]

    def test_stripes(self):
        img, mask = render(ShapeLabel("red", "circle", "striped"))
        assert len({tuple(p) for p in img[~mask]}) == 2


class TestDescribe:
    @settings(max_examples=80, deadline=None)
    @given(i=st.integers(0, 215), dy=st.floats(-4, 4), dx=st.floats(-4, 4))
    def test_recovers_jittered_renders(self, i, dy, dx):
        label = all_labels()[i]
        img, _ = render(label, (16 + dy, 16 + dx))
        assert describe(img) == label

    def test_rejects_noise(self):
        noise = np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)
        assert describe(noise) is None

    def test_rejects_blank(self):
        img, mask = render(ShapeLabel("red", "circle", "white"))
        img[mask] = (235, 235, 235)
        assert describe(img) is None


class TestDataset:
    def test_deterministic(self):
        a, b = make_toy_dataset(20, seed=4), make_toy_dataset(20, seed=4)
        assert a.captions() == b.captions()
        np.testing.assert_array_equal(a.images(), b.images())
        assert a.captions() != make_toy_dataset(20, seed=5).captions()

    def test_round_trip(self, tmp_path):
        ds = make_toy_dataset(12, seed=1)
        ds.save(tmp_path / "ds")
        back = CaptionedImageSet.load(tmp_path / "ds")
        assert back.captions() == ds.captions()
        np.testing.assert_array_equal(back.images(), ds.images())
        assert [it.label for it in back] == [it.label for it in ds]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match=MANIFEST_NAME):
            CaptionedImageSet.load(tmp_path)

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text("only-a-name\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":1:"):
            CaptionedImageSet.load(tmp_path)

    def test_png_bytes_stable(self, tmp_path):
        img, _ = render(ShapeLabel("purple", "triangle", "gray", "large"))
        save_png(tmp_path / "a.png", img)
        save_png(tmp_path / "b.png", load_png(tmp_path / "a.png"))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        with pytest.raises(ValueError):
            save_png(tmp_path / "c.png", img.astype(np.float32))

    def test_image_key(self):
        img, _ = render(ShapeLabel("red", "circle", "white"), (16.0, 12.0))
        assert image_key(img) == image_key(img.copy())
        assert image_key(img) != image_key(img[:, ::-1])


class TestSeeds:
    def test_stable_and_separated(self):
        assert rng.derive_seed(0, "patch") == rng.derive_seed(0, "patch")
        assert len({rng.derive_seed(0, "patch", t) for t in range(100)}) == 100
        assert rng.derive_seed(0, "patch") != rng.derive_seed(0, "noise")
        assert rng.derive_seed(0, "patch") != rng.derive_seed(1, "patch")

    def test_in_range(self):
        for s in (0, 1, 2**40, -5):
            assert 0 <= rng.derive_seed(s, "x") < 2**63
