import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concutmix.cutmix import MixBox, area_label, draw_lambda, mix, sample_box


def _pixel_count(box, w, h):
    mask = np.zeros((w, h), dtype=bool)
    mask[box.x0:box.x1, box.y0:box.y1] = True
    return int(mask.sum())


def test_box_centered_quarter():
    box = sample_box(8, 8, 0.25, None, center=(4, 4))
    assert (box.x1 - box.x0, box.y1 - box.y0) == (4, 4)
    assert _pixel_count(box, 8, 8) / 64 == 0.25


def test_box_clipped_at_corner():
    box = sample_box(8, 8, 0.25, None, center=(0, 0))
    assert _pixel_count(box, 8, 8) / 64 == 0.0625


def test_box_near_full_area_is_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        box = sample_box(8, 6, 1 - 1e-12, rng)
        assert 0 <= box.x0 < box.x1 <= 8 and 0 <= box.y0 < box.y1 <= 6
        assert box.area / 48 <= 1


def test_draw_lambda_open_interval():
    class Stub:
        def __init__(self):
            self.values = [0.0, 0.0, 0.3]

        def random(self):
            return self.values.pop(0)

    assert draw_lambda(Stub()) == 0.3


def test_mix_full_box_returns_foreground():
    fg = np.full((4, 4, 3), 0.9)
    bg = np.full((4, 4, 3), 0.1)
    s = mix((fg, 2), (bg, 0), MixBox(0, 0, 4, 4), 3)
    np.testing.assert_array_equal(s.image, fg)
    np.testing.assert_array_equal(s.area_label, [0, 0, 1])
    assert s.lambda_eff == 1.0


def test_mix_identity():
    img = np.random.default_rng(0).random((5, 5, 2))
    s = mix((img, 1), (img, 1), MixBox(1, 1, 3, 4), 4)
    np.testing.assert_array_equal(s.image, img)
    np.testing.assert_array_equal(s.area_label, [0, 1, 0, 0])


def test_mix_area_label_cat_dog():
    fg = np.ones((8, 8, 3))
    bg = np.zeros((8, 8, 3))
    box = MixBox(2, 2, 6, 6)
    s = mix((fg, 3), (bg, 7), box, 10)
    fraction = (s.image[..., 0] == 1).sum() / 64  # pixel-count oracle
    expected = np.zeros(10)
    expected[3], expected[7] = fraction, 1 - fraction
    np.testing.assert_array_equal(s.area_label, expected)
    assert s.area_label[3] == 0.25 and s.area_label[7] == 0.75


def test_mix_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        mix((np.zeros((4, 4, 3)), 0), (np.zeros((4, 5, 3)), 1), MixBox(0, 0, 1, 1), 2)


@settings(max_examples=300, deadline=None)
@given(w=st.integers(1, 12), h=st.integers(1, 12), lam=st.floats(1e-6, 1 - 1e-9),
       seed=st.integers(0, 2**32 - 1))
def test_lambda_recovered_from_pixels(w, h, lam, seed):
    rng = np.random.default_rng(seed)
    fg = rng.uniform(1.0, 2.0, size=(w, h, 2))  # disjoint value ranges
    bg = rng.uniform(-2.0, -1.0, size=(w, h, 2))
    box = sample_box(w, h, lam, rng)
    s = mix((fg, 0), (bg, 1), box, 2)
    from_fg = np.all(s.image == fg, axis=-1).sum()
    assert from_fg / (w * h) == s.lambda_eff
    np.testing.assert_array_equal(mix((fg, 0), (bg, 1), box, 2).image, s.image)


def test_area_label_fuzz_probability_vectors():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        k = int(rng.integers(1, 8))
        fg, bg = rng.integers(0, k, size=2)
        w, h = (int(v) for v in rng.integers(1, 10, size=2))
        box = sample_box(w, h, draw_lambda(rng), rng)
        lab = area_label(fg, bg, box.area / (w * h), k)
        assert lab.min() >= 0
        assert abs(lab.sum() - 1) <= 1e-12
        assert np.count_nonzero(lab) <= 2
