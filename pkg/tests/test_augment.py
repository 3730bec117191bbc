import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssod.augment import (
    AugmentationRecord, MixKind, color_cutout, hflip, mixup, mosaic, strong_augment, weak_augment,
)
from ssod.config import AugmentConfig
from ssod.synthdata import AnnotationSet, ImageSample, Source


class FixedRng:
    """Stands in for a Generator where only ``random()`` matters."""

    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def sample(size=100, boxes=((10, 20, 30, 40),), labels=(1,), value=None, sid="u", source=Source.HUMAN):
    rng = np.random.default_rng(5)
    px = rng.random((size, size, 3)).astype(np.float32) if value is None else np.full((size, size, 3), value, np.float32)
    ann = AnnotationSet.from_labels(np.asarray(boxes, dtype=float).reshape(-1, 4), list(labels), 3, source)
    return ImageSample(sid, px, ann)


def test_weak_no_flip_is_identity():
    s = sample()
    out, rec = weak_augment(s, FixedRng(0.9))
    assert not rec.flipped
    assert np.array_equal(out.pixels, s.pixels)
    assert np.array_equal(out.annotations.boxes, s.annotations.boxes)


def test_weak_flip_moves_box():
    out, rec = weak_augment(sample(), FixedRng(0.1))
    assert rec.flipped
    assert np.allclose(out.annotations.boxes, [[70, 20, 90, 40]])


def test_flip_twice_restores():
    s = sample()
    back = hflip(hflip(s))
    assert np.array_equal(back.pixels, s.pixels)
    assert np.allclose(back.annotations.boxes, s.annotations.boxes)


def test_record_lambda_iff_mixup():
    AugmentationRecord(mix_kind=MixKind.MIXUP, lambda_m=0.3)
    with pytest.raises(ValueError):
        AugmentationRecord(mix_kind=MixKind.MIXUP)
    with pytest.raises(ValueError):
        AugmentationRecord(mix_kind=MixKind.MOSAIC_H, lambda_m=0.3)


def test_identity_jitter_without_cutout_is_noop():
    cfg = AugmentConfig(brightness=(0.0, 0.0), contrast=(1.0, 1.0), p_cutout=0.0)
    s = sample()
    out = color_cutout(s, cfg, np.random.default_rng(0))
    assert np.allclose(out.pixels, s.pixels, atol=1e-7)


def test_brightness_clips_at_one():
    cfg = AugmentConfig(brightness=(0.1, 0.1), contrast=(1.0, 1.0), p_cutout=0.0)
    out = color_cutout(sample(value=0.95), cfg, np.random.default_rng(0))
    assert np.all(out.pixels == 1.0)


def test_cutout_inside_image_and_boxes_untouched():
    cfg = AugmentConfig()
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = sample(size=64, boxes=((5, 5, 20, 20), (30, 30, 60, 50)), labels=(1, 2))
        out, rec = strong_augment(s, sample(size=64, sid="l"), AugmentConfig(p_none=1.0, p_mixup=0.0, p_mosaic=0.0), rng)
        r = rec.cutout_rect
        assert 0 <= r.x1 < r.x2 <= 64 and 0 <= r.y1 < r.y2 <= 64
        assert np.array_equal(out.annotations.boxes, s.annotations.boxes)
        assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0
        assert (r.x2 - r.x1) * (r.y2 - r.y1) <= cfg.max_cutout_area_frac * 64 * 64 + 1e-9


def test_mixup_pixel_arithmetic():
    out = mixup(sample(value=0.2), sample(value=0.8, sid="l"), 1.0, lam=0.5)
    assert np.allclose(out.pixels, 0.5)


def test_mixup_lambda_one_keeps_unlabeled():
    u = sample(source=Source.PSEUDO)
    l = sample(sid="l", boxes=((50, 50, 70, 80),), labels=(2,))
    out = mixup(u, l, 1.0, lam=1.0)
    assert np.array_equal(out.pixels, u.pixels)
    assert np.allclose(out.annotations.weights, [1.0, 0.0])


@given(st.floats(0.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_mixup_weight_bookkeeping(lam):
    u = sample(size=32, boxes=((1, 1, 5, 5), (10, 10, 20, 20)), labels=(1, 3), source=Source.PSEUDO)
    l = sample(size=32, sid="l", boxes=((2, 2, 8, 8), (3, 3, 9, 9), (12, 1, 30, 9)), labels=(2, 2, 1))
    out = mixup(u, l, 1.0, lam=lam)
    assert len(out.annotations) == 5
    assert out.annotations.weights.sum() == pytest.approx(2 * lam + 3 * (1 - lam), abs=1e-12)
    assert out.annotations.source == Source.MIXED
    live = out.annotations.weights > 0
    assert list(out.annotations.labels[live]) == list(np.array([1, 3, 2, 2, 1])[live])


def test_mosaic_h_box_placement():
    u = sample(size=128, boxes=((20, 20, 60, 60),), labels=(1,))
    l = sample(size=128, sid="l", boxes=((20, 20, 60, 60),), labels=(2,))
    out = mosaic(u, l, MixKind.MOSAIC_H)
    assert out.pixels.shape == (128, 128, 3)
    assert np.allclose(out.annotations.boxes, [[10, 20, 30, 60], [74, 20, 94, 60]])
    assert list(out.annotations.labels) == [1, 2]


def test_mosaic_v_box_placement():
    u = sample(size=128, boxes=((20, 20, 60, 60),), labels=(1,))
    l = sample(size=128, sid="l", boxes=((20, 20, 60, 60),), labels=(2,))
    out = mosaic(u, l, MixKind.MOSAIC_V)
    assert np.allclose(out.annotations.boxes, [[20, 10, 60, 30], [20, 74, 60, 94]])


def test_mosaic_drops_tiny_boxes():
    u = sample(size=64, boxes=((0, 0, 4, 4),), labels=(1,))
    out = mosaic(u, sample(size=64, sid="l"), MixKind.MOSAIC_H)
    assert len(out.annotations) == 1


def test_strong_no_mix_branch_equals_color_cutout():
    cfg = AugmentConfig(p_none=1.0, p_mixup=0.0, p_mosaic=0.0)
    u, l = sample(), sample(sid="l")
    out, rec = strong_augment(u, l, cfg, np.random.default_rng(11))
    ref = color_cutout(u, cfg, np.random.default_rng(11))
    assert rec.mix_kind == MixKind.NONE and rec.partner_id is None
    assert np.array_equal(out.pixels, ref.pixels)


def test_strong_is_deterministic_per_seed():
    cfg = AugmentConfig()
    for seed in range(10):
        a, ra = strong_augment(sample(), sample(sid="l"), cfg, np.random.default_rng(seed))
        b, rb = strong_augment(sample(), sample(sid="l"), cfg, np.random.default_rng(seed))
        assert ra == rb
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.annotations.boxes, b.annotations.boxes)


def test_strong_leaves_inputs_alone():
    u, l = sample(), sample(sid="l")
    pu, pl = u.pixels.copy(), l.pixels.copy()
    for seed in range(10):
        strong_augment(u, l, AugmentConfig(), np.random.default_rng(seed))
    assert np.array_equal(u.pixels, pu) and np.array_equal(l.pixels, pl)
