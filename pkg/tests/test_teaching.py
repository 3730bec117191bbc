import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import images, peaky_state
from ssod.boxgeom import Box
from ssod.detector import Detection, detect_batch, init
from ssod.config import ArchConfig
from ssod.teaching import (
    DegenerateInputError, Generator, PseudoLabelSet, corectify_fuse, corectify_pseudo_label_batch,
    pseudo_label, pseudo_label_batch,
)


def test_uniform_model_gives_no_pseudo_labels():
    st_ = init(ArchConfig(), 0)
    for im in images(3):
        assert len(pseudo_label(st_, im, 0.9, 0.5)) == 0


def test_pseudo_labels_respect_tau_and_foreground():
    st_ = peaky_state()
    for ps in pseudo_label_batch(st_, images(4), 0.9, 0.5):
        assert (ps.confidences >= 0.9).all()
        assert (ps.hard_labels >= 1).all()
        assert ps.generator == Generator.SINGLE


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
@settings(max_examples=25, deadline=None)
def test_tau_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    st_ = peaky_state()
    ims = images(2)
    a = pseudo_label_batch(st_, ims, lo, 0.5)
    b = pseudo_label_batch(st_, ims, hi, 0.5)
    for pa, pb in zip(a, b):
        assert len(pb) <= len(pa)
        # the higher threshold keeps a subset of the lower one's boxes
        keys = {tuple(np.round(x, 9)) for x in pa.boxes}
        assert all(tuple(np.round(x, 9)) in keys for x in pb.boxes)


def test_threshold_and_argmax_examples():
    ps = PseudoLabelSet("x", [[0, 0, 5, 5]], [1], [0.95])
    assert len(ps) == 1
    with pytest.raises(ValueError):
        PseudoLabelSet("x", [[0, 0, 5, 5]], [0], [0.95])
    d = Detection(Box(0, 0, 5, 5), np.array([0.05, 0.92, 0.03]), 0.92)
    assert d.label == 1


def test_fuse_hand_values():
    a = (np.array([0.2, 0.8, 0.0]), Box(10, 10, 20, 20))
    b = (np.array([0.4, 0.6, 0.0]), Box(12, 10, 22, 20))
    f = corectify_fuse(a, b)
    x1 = (10 * 0.8 + 12 * 0.6) / 1.4
    assert np.allclose(f.fused_box, [x1, 10, x1 + 10, 20], atol=1e-9, rtol=0)
    assert f.fused_box.x1 == pytest.approx(10.857142857142858, abs=1e-9)
    assert np.allclose(f.fused_probs, [0.3, 0.7, 0.0], atol=1e-12)
    assert f.confidence == pytest.approx(0.7, abs=1e-12)


def test_fuse_rejects_disagreement_at_tau():
    a = (np.array([0.05, 0.95, 0.0]), Box(0, 0, 10, 10))
    b = (np.array([0.7, 0.3, 0.0]), Box(0, 0, 10, 10))
    f = corectify_fuse(a, b)
    assert f.confidence == pytest.approx(0.625, abs=1e-12)
    assert f.confidence < 0.9


def test_fuse_identical_inputs():
    a = (np.array([0.1, 0.3, 0.6]), Box(1.5, 2.25, 7, 9))
    f = corectify_fuse(a, a)
    assert np.array_equal(f.fused_probs, a[0])
    assert f.fused_box == a[1]


def test_fuse_zero_confidence_guard():
    z = (np.array([1.0, 0.0, 0.0]), Box(0, 0, 1, 1))
    with pytest.raises(DegenerateInputError):
        corectify_fuse(z, z)


def simplex(draw, k=4):
    v = np.array(draw(st.lists(st.floats(1e-3, 1.0), min_size=k, max_size=k)))
    return v / v.sum()


@st.composite
def fuse_pair(draw):
    pa, pb = simplex(draw), simplex(draw)
    boxes = []
    for _ in range(2):
        x = draw(st.floats(0, 50))
        y = draw(st.floats(0, 50))
        boxes.append(Box(x, y, x + draw(st.floats(1, 30)), y + draw(st.floats(1, 30))))
    return (pa, boxes[0]), (pb, boxes[1])


@given(fuse_pair())
def test_fuse_invariants(pair):
    a, b = pair
    f = corectify_fuse(a, b)
    assert np.allclose(f.fused_probs, 0.5 * (a[0] + b[0]), atol=1e-15)
    lo = np.minimum(a[1], b[1])
    hi = np.maximum(a[1], b[1])
    fb = np.asarray(f.fused_box)
    assert (lo <= fb).all() and (fb <= hi).all()


def test_identical_partner_matches_single_model():
    st_ = peaky_state(1)
    ims = images(4, seed=9)
    single = pseudo_label_batch(st_, ims, 0.9, 0.5)
    co = corectify_pseudo_label_batch(st_, st_, ims, 0.9, 0.5, refine_mode="match")
    assert sum(len(p) for p in single) > 0
    for s, c in zip(single, co):
        assert c.generator == Generator.CORECTIFY
        assert np.allclose(s.boxes, c.boxes, atol=1e-9)
        assert np.array_equal(s.hard_labels, c.hard_labels)
        assert np.allclose(s.confidences, c.confidences, atol=1e-12)


@pytest.mark.parametrize("mode", ["proposal", "cell", "match"])
def test_corectify_output_contract(mode):
    a, b = peaky_state(1), peaky_state(2)
    for ps in corectify_pseudo_label_batch(a, b, images(3), 0.6, 0.5, refine_mode=mode):
        assert (ps.confidences >= 0.6).all()
        assert (ps.hard_labels >= 1).all()
        assert len(ps.boxes) == len(ps.hard_labels) == len(ps.confidences)


def test_to_annotations_keeps_confidences():
    ps = PseudoLabelSet("x", [[0, 0, 5, 5], [1, 1, 9, 9]], [1, 2], [0.95, 0.91])
    ann = ps.to_annotations(3)
    assert list(ann.labels) == [1, 2]
    assert np.allclose(ann.confidences, [0.95, 0.91])
    assert np.allclose(ann.weights, 1.0)
