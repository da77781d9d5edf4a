import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textssl.augment import AugmentConfig, apply_all, apply_visual, augment, make_view_pair
from textssl.dataset import LineImage, render_synthetic_line

LINE = render_synthetic_line("the quick brown fox jumps", "printed", seed=2)


def test_zero_strength_is_identity():
    off = AugmentConfig.none()
    assert np.array_equal(apply_visual(LINE, 5, off).pixels, LINE.pixels)
    assert np.array_equal(apply_all(LINE, None, 5, off).pixels, LINE.pixels)


def test_fixed_seed_is_deterministic():
    assert np.array_equal(apply_visual(LINE, 9).pixels, apply_visual(LINE, 9).pixels)
    assert np.array_equal(apply_all(LINE, None, 9).pixels, apply_all(LINE, None, 9).pixels)
    assert not np.array_equal(apply_visual(LINE, 9).pixels, LINE.pixels)


def test_gamma_two_on_half_grey():
    img = LineImage("g", np.full((40, 32), 0.5))
    cfg = AugmentConfig.none().with_(gamma=(2.0, 2.0))
    assert np.allclose(apply_visual(img, 0, cfg).pixels, 0.25)


def test_full_masking_gives_fill_value():
    cfg = AugmentConfig.none().with_(mask_rate=1.0, max_masks=40, max_mask_width=64, full_height=1.0, fill=0.7)
    img = LineImage("m", np.random.default_rng(0).random((40, 64)))
    out = apply_all(img, None, 3, cfg)
    assert out.pixels.mean() == pytest.approx(0.7, abs=1e-6)


def test_all_without_geometry_or_masks_equals_visual():
    cfg = AugmentConfig.all().with_(skew=0.0, scale=(1.0, 1.0), mask_rate=0.0)
    for seed in range(5):
        assert np.array_equal(apply_all(LINE, None, seed, cfg).pixels, apply_visual(LINE, seed, cfg).pixels)


def test_all_renormalizes_height():
    for seed in range(10):
        out = apply_all(LINE, None, seed)
        assert out.height == 40
        assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), w=st.integers(8, 200))
def test_visual_keeps_geometry_and_range(seed, w):
    img = LineImage("v", np.random.default_rng(seed % 97).random((40, w)))
    out = apply_visual(img, seed)
    assert out.pixels.shape == img.pixels.shape
    assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_augment_dispatch():
    assert augment(LINE, "none", 0) is LINE
    with pytest.raises(ValueError):
        augment(LINE, "bogus", 0)
    with pytest.raises(ValueError):
        AugmentConfig.named("bogus")


def test_view_pair_shifts_are_frame_multiples_with_overlap():
    signs = set()
    for seed in range(1000):
        vp = make_view_pair(LINE, 64, seed)
        assert vp.pixel_shift % 8 == 0
        assert vp.overlap[1] - vp.overlap[0] >= 1
        assert vp.view_a.width == vp.view_b.width == 64
        signs.add(np.sign(vp.shift_frames))
    assert {-1, 1} <= signs


def test_view_pair_without_shift_or_augmentation_is_identical():
    vp = make_view_pair(LINE, 64, 4, AugmentConfig.none(), shift=False)
    assert vp.shift_frames == 0
    assert np.array_equal(vp.view_a.pixels, vp.view_b.pixels)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), crop_frames=st.integers(1, 12), width=st.integers(16, 160))
def test_view_pair_correspondence(seed, crop_frames, width):
    img = LineImage("r", np.random.default_rng(seed).random((40, width)))
    vp = make_view_pair(img, 8 * crop_frames, seed, AugmentConfig.none())
    a, b = vp.pairs()
    assert len(a) >= 1
    for i, j in zip(a, b):
        assert np.array_equal(vp.view_a.pixels[:, 8 * i:8 * i + 8], vp.view_b.pixels[:, 8 * j:8 * j + 8])


def test_view_pair_errors():
    with pytest.raises(ValueError):
        make_view_pair(LINE, 60, 0)
    with pytest.raises(ValueError):
        make_view_pair(LineImage("n", np.ones((40, 12))), 64, 0)


def test_short_line_is_padded_to_crop():
    short = LineImage("s", np.zeros((40, 24)))
    vp = make_view_pair(short, 64, 1, AugmentConfig.none())
    assert vp.view_a.width == 64
    assert (vp.view_a.pixels[:, 24:] == 1.0).all() or vp.view_a.pixels.max() == 1.0
