import json

import numpy as np
import pytest

from ssod.config import ConfigError
from ssod.synthdata import (
    MIN_SIDE, AnnotationSet, DatasetParseError, DatasetSplit, Source, generate_dataset, load_dataset,
    make_dataset, save_dataset, split_dataset,
)


def test_generation_is_deterministic():
    a = generate_dataset(7, 10)
    b = generate_dataset(7, 10)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.annotations.boxes.tobytes() == y.annotations.boxes.tobytes()


def test_different_seeds_differ():
    assert generate_dataset(1, 1)[0].pixels.tobytes() != generate_dataset(2, 1)[0].pixels.tobytes()


def test_corpus_contract():
    samples = generate_dataset(0, 300, max_shapes=4)
    for s in samples:
        ann = s.annotations
        assert 1 <= len(ann) <= 4
        assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0
        w = ann.boxes[:, 2] - ann.boxes[:, 0]
        h = ann.boxes[:, 3] - ann.boxes[:, 1]
        assert (w >= MIN_SIDE).all() and (h >= MIN_SIDE).all()
        assert (ann.boxes[:, :2] >= 0).all() and (ann.boxes[:, 2] <= s.width).all() and (ann.boxes[:, 3] <= s.height).all()
        cw = ann.class_weights
        assert ((cw == 0) | (cw == 1)).all() and (cw.sum(axis=1) == 1).all() and (cw[:, 0] == 0).all()
        assert ann.source == Source.HUMAN


def test_boxes_are_tight():
    # shapes are flat-coloured on a noisy background: the dominant colour inside a
    # box must touch all four of its border lines
    for s in generate_dataset(4, 40):
        for x1, y1, x2, y2 in s.annotations.boxes.astype(int):
            inner = s.pixels[y1:y2, x1:x2]
            colours, counts = np.unique(inner.reshape(-1, 3), axis=0, return_counts=True)
            fill = np.all(inner == colours[counts.argmax()], axis=2)
            assert fill[0].any() and fill[-1].any() and fill[:, 0].any() and fill[:, -1].any()


def test_distractors_leave_annotations_alone():
    plain = generate_dataset(5, 60)
    cluttered = generate_dataset(5, 60, distractors=3)
    changed = 0
    for a, b in zip(plain, cluttered):
        assert a.annotations.boxes.tobytes() == b.annotations.boxes.tobytes()
        assert np.array_equal(a.annotations.class_weights, b.annotations.class_weights)
        for x1, y1, x2, y2 in a.annotations.boxes.astype(int):
            assert np.array_equal(a.pixels[y1:y2, x1:x2], b.pixels[y1:y2, x1:x2])
        changed += not np.array_equal(a.pixels, b.pixels)
    assert changed > 20


def test_no_distractors_when_every_kind_is_a_class():
    a = generate_dataset(5, 10, classes=8)
    b = generate_dataset(5, 10, classes=8, distractors=3)
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))


def test_bad_sizes_rejected():
    with pytest.raises(ConfigError):
        generate_dataset(0, -1)
    with pytest.raises(ConfigError):
        generate_dataset(0, 5, image_size=16, min_size=20, max_size=28)
    with pytest.raises(ConfigError):
        generate_dataset(0, 5, distractors=-1)


@pytest.mark.parametrize("frac,n_l", [(0.1, 200), (1.0, 2000), (0.0005, 1), (0.25, 500)])
def test_split_counts(frac, n_l):
    ids = [f"img{i:06d}" for i in range(2000)]
    sp = split_dataset(ids, frac, 3)
    assert sp.n_l == n_l and sp.n_u == 2000 - n_l
    assert not sp.labeled_ids & sp.unlabeled_ids


def test_split_deterministic_and_seeded():
    ids = [f"img{i:06d}" for i in range(100)]
    assert split_dataset(ids, 0.1, 5) == split_dataset(ids, 0.1, 5)
    assert split_dataset(ids, 0.1, 5).labeled_ids != split_dataset(ids, 0.1, 6).labeled_ids


@pytest.mark.parametrize("frac", [0.0, -0.1, 1.5])
def test_split_fraction_range(frac):
    with pytest.raises(ConfigError):
        split_dataset(["a", "b"], frac, 0)


def test_split_disjointness_enforced():
    with pytest.raises(ValueError):
        DatasetSplit(frozenset({"a"}), frozenset({"a", "b"}))


def test_unlabeled_access_is_gated():
    ds = make_dataset(1, 20, 0.25, heldout=4)
    uid = ds.unlabeled_ids()[0]
    assert ds.unlabeled(uid).annotations is None
    assert len(ds.oracle_annotations(uid)) >= 1
    with pytest.raises(KeyError):
        ds.labeled(uid)
    assert len(ds.heldout_ids()) == 4
    assert not set(ds.heldout_ids()) & (set(ds.labeled_ids()) | set(ds.unlabeled_ids()))


def test_round_trip(tmp_path):
    ds = make_dataset(2, 12, 0.5, heldout=3)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.labeled_ids() == ds.labeled_ids()
    assert back.unlabeled_ids() == ds.unlabeled_ids()
    assert back.heldout_ids() == ds.heldout_ids()
    for sid in ds.ids():
        a, b = ds.samples[sid], back.samples[sid]
        assert np.array_equal(a.annotations.boxes, b.annotations.boxes)
        assert np.array_equal(a.annotations.labels, b.annotations.labels)
        assert np.array_equal(a.pixels, b.pixels)


def test_truncated_file_is_parse_error(tmp_path):
    save_dataset(make_dataset(2, 4, 0.5), tmp_path)
    p = tmp_path / "annotations.json"
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(DatasetParseError):
        load_dataset(tmp_path)


def test_corrupt_record_named(tmp_path):
    ds = make_dataset(2, 4, 0.5)
    save_dataset(ds, tmp_path)
    p = tmp_path / "annotations.json"
    doc = json.loads(p.read_text())
    doc["samples"][2]["labels"] = [99] * len(doc["samples"][2]["labels"])
    p.write_text(json.dumps(doc))
    with pytest.raises(DatasetParseError, match=doc["samples"][2]["id"]):
        load_dataset(tmp_path)


def test_annotation_set_invariants():
    with pytest.raises(ValueError):
        AnnotationSet(np.array([[0, 0, 0, 5.0]]), np.array([[0, 1.0, 0]]))
    with pytest.raises(ValueError):
        AnnotationSet(np.array([[0, 0, 1, 5.0]]), np.array([[0, -1.0, 0]]))
    e = AnnotationSet.empty(3)
    assert len(e) == 0 and e.num_classes == 3
