from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import images, peaky_state
from ssod.boxgeom import iou
from ssod.config import ArchConfig, ConfigError
from ssod.detector import init
from ssod.evaluation import average_precision, evaluate, evaluate_detections, interpolated_ap, pseudo_quality


def reference_ap(dets, gts, thr, cls):
    """Independent AP: greedy matching written out loop by loop, exact-fraction
    precision, interpolation by scanning for max precision at recall >= r."""
    pool = []
    for i, d in enumerate(dets):
        for j, (box, score, lab) in enumerate(d):
            if lab == cls:
                pool.append((score, i, j, box))
    pool.sort(key=lambda t: (-t[0], t[1], t[2]))
    used = {}
    n_gt = 0
    for i, (boxes, labels) in enumerate(gts):
        for k, lab in enumerate(labels):
            if lab == cls:
                used[(i, k)] = False
                n_gt += 1
    tp = fp = 0
    points = []
    for score, i, _, box in pool:
        best, best_k = -1.0, None
        for k, lab in enumerate(gts[i][1]):
            if lab != cls or used[(i, k)]:
                continue
            v = iou(box, gts[i][0][k])
            if v > best:
                best, best_k = v, k
        if best_k is not None and best >= thr:
            used[(i, best_k)] = True
            tp += 1
        else:
            fp += 1
        points.append((Fraction(tp, n_gt), Fraction(tp, tp + fp)))
    total = Fraction(0)
    for r in range(101):
        rr = Fraction(r, 100)
        total += max([p for rec, p in points if rec >= rr], default=Fraction(0))
    return float(total / 101)


def gt(boxes, labels):
    return np.asarray(boxes, dtype=float).reshape(-1, 4), np.asarray(labels)


def test_single_hit_and_miss():
    g = [gt([[0, 0, 10, 10]], [1])]
    assert average_precision([[([0, 0, 10, 10], 0.9, 1)]], g, 0.5) == {1: 1.0}
    assert average_precision([[]], g, 0.5) == {1: 0.0}


def test_fp_then_tp_curve():
    g = [gt([[0, 0, 10, 10]], [1])]
    dets = [[([50, 50, 60, 60], 0.95, 1), ([0, 0, 10, 10], 0.9, 1)]]
    assert average_precision(dets, g, 0.5)[1] == pytest.approx(0.5, abs=1e-6)


def test_interpolation_by_hand():
    # TP, FP, TP with 3 GT: recall 1/3, 1/3, 2/3; precision 1, 1/2, 2/3
    ap = interpolated_ap(np.array([True, False, True]), 3)
    expected = (34 * 1.0 + 33 * (2 / 3) + 34 * 0.0) / 101
    assert ap == pytest.approx(expected, abs=1e-12)


def test_three_image_scenario_by_hand():
    gts = [gt([[0, 0, 10, 10], [20, 20, 30, 30]], [1, 1]), gt([[5, 5, 15, 15]], [1]), gt([[0, 0, 8, 8]], [2])]
    dets = [
        [([0, 0, 10, 10], 0.9, 1), ([1, 1, 11, 11], 0.8, 1)],  # second is a duplicate -> FP
        [([5, 5, 15, 15], 0.7, 1)],
        [([0, 0, 8, 8], 0.6, 2)],
    ]
    # class 1 ranking: TP(0.9) FP(0.8) TP(0.7); 3 GT -> same curve as the test above
    res = average_precision(dets, gts, 0.5)
    assert res[1] == pytest.approx((34 + 33 * 2 / 3) / 101, abs=1e-12)
    assert res[2] == 1.0


def test_classes_without_gt_are_excluded():
    g = [gt([[0, 0, 10, 10]], [1])]
    dets = [[([0, 0, 10, 10], 0.9, 1), ([0, 0, 10, 10], 0.99, 3)]]
    r = evaluate_detections(dets, g)
    assert set(r.per_class_ap) == {1}
    assert r.ap50 == r.ap75 == r.map_5095 == 1.0


def test_oracle_and_empty_detector():
    samples = images(6)
    oracle = [[(b, 1.0, int(l)) for b, l in zip(s.annotations.boxes, s.annotations.labels)] for s in samples]
    r = evaluate_detections(oracle, [s.annotations for s in samples])
    assert r.ap50 == r.ap75 == r.map_5095 == 1.0
    r0 = evaluate_detections([[] for _ in samples], [s.annotations for s in samples])
    assert r0.ap50 == r0.ap75 == r0.map_5095 == 0.0


def test_empty_eval_set_is_config_error():
    with pytest.raises(ConfigError):
        evaluate(init(ArchConfig(), 0), [])


@st.composite
def scenario(draw):
    n_img = draw(st.integers(1, 5))
    gts, dets = [], []
    coord = st.integers(0, 40)
    for _ in range(n_img):
        n_g = draw(st.integers(0, 3))
        boxes, labels = [], []
        for _ in range(n_g):
            x, y = draw(coord), draw(coord)
            boxes.append([x, y, x + draw(st.integers(4, 20)), y + draw(st.integers(4, 20))])
            labels.append(draw(st.integers(1, 2)))
        gts.append(gt(boxes, labels))
        d = []
        for _ in range(draw(st.integers(0, 4))):
            if boxes and draw(st.booleans()):
                b = np.array(boxes[draw(st.integers(0, len(boxes) - 1))], dtype=float)
                b = b + draw(st.integers(-3, 3))
            else:
                x, y = draw(coord), draw(coord)
                b = np.array([x, y, x + draw(st.integers(4, 20)), y + draw(st.integers(4, 20))], dtype=float)
            d.append((b, draw(st.integers(1, 20)) / 20, draw(st.integers(1, 2))))
        dets.append(d)
    return dets, gts


@given(scenario(), st.sampled_from([0.5, 0.75]))
@settings(max_examples=150, deadline=None)
def test_matches_brute_force_reference(sc, thr):
    dets, gts = sc
    res = average_precision(dets, gts, thr)
    for c, v in res.items():
        assert v == pytest.approx(reference_ap(dets, gts, thr, c), abs=1e-6)


@given(scenario())
@settings(max_examples=80, deadline=None)
def test_rank_only_dependence(sc):
    dets, gts = sc
    warped = [[(b, s ** 3 * 0.5 + 0.1, l) for b, s, l in d] for d in dets]
    assert average_precision(dets, gts, 0.5) == pytest.approx(average_precision(warped, gts, 0.5), abs=1e-12)


@given(scenario())
@settings(max_examples=80, deadline=None)
def test_top_false_positive_never_helps(sc):
    dets, gts = sc
    before = average_precision(dets, gts, 0.5)
    worse = [list(d) for d in dets]
    worse[0] = [(np.array([200.0, 200, 210, 210]), 2.0, c) for c in (1, 2)] + worse[0]
    after = average_precision(worse, gts, 0.5)
    for c in before:
        assert after[c] <= before[c] + 1e-12


def test_pseudo_quality_tau_zero_equals_evaluate():
    st_ = peaky_state()
    samples = images(4)
    a = pseudo_quality(st_, samples, tau=0.0)
    b = evaluate(st_, samples, score_threshold=0.0)
    assert a == b


def test_pseudo_quality_counts_shrink_with_tau():
    st_ = peaky_state()
    samples = images(4)
    counts = [pseudo_quality(st_, samples, tau=t).n_dets for t in (0.0, 0.3, 0.6, 0.9)]
    assert counts == sorted(counts, reverse=True)
    co = pseudo_quality((st_, peaky_state(5)), samples, tau=0.6)
    assert 0.0 <= co.map_5095 <= 1.0
