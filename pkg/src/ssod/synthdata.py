"""Procedural shapes dataset standing in for a labeled/unlabeled detection corpus.

Images are coloured shapes on a smoothed-noise background. Ground-truth boxes
are the tight bounds of the drawn pixel masks. The on-disk layout is
``images/<id>.png`` plus ``annotations.json``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ConfigError

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "cross", "ring", "frame", "vtriangle")
MIN_SIDE = 8


class Source(str, Enum):
    HUMAN = "human"
    PSEUDO = "pseudo"
    MIXED = "mixed"


class DatasetParseError(ValueError):
    pass


@dataclass
class AnnotationSet:
    """Boxes with per-box class-weight vectors over ``C + 1`` entries (0 = background).

    ``confidences`` carries the labeling-time confidence of each box; human
    boxes use 1.0.
    """

    boxes: np.ndarray
    class_weights: np.ndarray
    source: Source = Source.HUMAN
    confidences: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.class_weights.ndim != 2:
            raise ValueError("class_weights must be a 2-D (boxes x classes+1) array")
        if len(self.class_weights) != n:
            raise ValueError(f"{n} boxes but {len(self.class_weights)} class-weight vectors")
        if self.confidences is None:
            self.confidences = np.ones(n)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(self.confidences) != n:
            raise ValueError("confidences length mismatch")
        if n:
            if not ((self.boxes[:, 0] < self.boxes[:, 2]) & (self.boxes[:, 1] < self.boxes[:, 3])).all():
                raise ValueError("degenerate box in annotation set")
            if (self.class_weights < 0).any():
                raise ValueError("negative class weight")

    @classmethod
    def from_labels(cls, boxes, labels, num_classes: int, source=Source.HUMAN, confidences=None):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        w = np.zeros((len(labels), num_classes + 1))
        w[np.arange(len(labels)), labels] = 1.0
        return cls(boxes, w, source, confidences)

    @classmethod
    def empty(cls, num_classes: int, source=Source.PSEUDO):
        return cls(np.zeros((0, 4)), np.zeros((0, num_classes + 1)), source)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def labels(self) -> np.ndarray:
        """Hard class index of each box (argmax of its weight vector)."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return self.class_weights.argmax(axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Scalar loss weight of each box (mass of its weight vector)."""
        return self.class_weights.sum(axis=1)

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[1] - 1

    def copy(self) -> "AnnotationSet":
        return AnnotationSet(self.boxes.copy(), self.class_weights.copy(), self.source, self.confidences.copy())


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    annotations: AnnotationSet | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_annotations(self, ann: AnnotationSet | None) -> "ImageSample":
        return ImageSample(self.id, self.pixels, ann)


@dataclass(frozen=True)
class DatasetSplit:
    labeled_ids: frozenset
    unlabeled_ids: frozenset
    heldout_ids: frozenset = frozenset()

    def __post_init__(self):
        if self.labeled_ids & self.unlabeled_ids or (self.labeled_ids | self.unlabeled_ids) & self.heldout_ids:
            raise ValueError("split id sets must be disjoint")

    @property
    def n_l(self) -> int:
        return len(self.labeled_ids)

    @property
    def n_u(self) -> int:
        return len(self.unlabeled_ids)


@dataclass
class Dataset:
    """Samples plus split. Unlabeled and held-out annotations are only reachable
    through :meth:`oracle_annotations`."""

    class_names: list[str]
    samples: dict[str, ImageSample]
    split: DatasetSplit
    _order: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self._order:
            self._order = list(self.samples)
        ids = set(self.samples)
        all_split = self.split.labeled_ids | self.split.unlabeled_ids | self.split.heldout_ids
        if not all_split <= ids:
            raise ConfigError(f"split references unknown ids, e.g. {sorted(all_split - ids)[:3]}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def ids(self) -> list[str]:
        return list(self._order)

    def labeled_ids(self) -> list[str]:
        return [i for i in self._order if i in self.split.labeled_ids]

    def unlabeled_ids(self) -> list[str]:
        return [i for i in self._order if i in self.split.unlabeled_ids]

    def heldout_ids(self) -> list[str]:
        return [i for i in self._order if i in self.split.heldout_ids]

    def labeled(self, sid: str) -> ImageSample:
        if sid not in self.split.labeled_ids:
            raise KeyError(f"{sid} is not a labeled sample")
        return self.samples[sid]

    def unlabeled(self, sid: str) -> ImageSample:
        """Unlabeled view: pixels only."""
        if sid not in self.split.unlabeled_ids:
            raise KeyError(f"{sid} is not an unlabeled sample")
        return self.samples[sid].with_annotations(None)

    def oracle_annotations(self, sid: str) -> AnnotationSet:
        """Ground truth of any sample, including withheld ones. Evaluation only."""
        return self.samples[sid].annotations

    def oracle_sample(self, sid: str) -> ImageSample:
        return self.samples[sid]


# --- generation ---------------------------------------------------------------


def _shape_mask(kind: str, xx, yy, x0, y0, w, h):
    cx, cy = x0 + w / 2, y0 + h / 2
    inside = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    u = (xx - cx) / (w / 2)
    v = (yy - cy) / (h / 2)
    if kind == "circle":
        return u * u + v * v <= 1.0
    if kind == "square":
        return inside
    if kind == "triangle":
        return inside & (np.abs(u) <= (v + 1) / 2)
    if kind == "vtriangle":
        return inside & (np.abs(u) <= (1 - v) / 2)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "cross":
        return inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3))
    if kind == "ring":
        r = u * u + v * v
        return (r <= 1.0) & (r >= 0.35)
    if kind == "frame":
        return inside & ((np.abs(u) >= 0.55) | (np.abs(v) >= 0.55))
    raise ValueError(kind)


def _render(rng: np.random.Generator, image_size: int, classes: int, max_shapes: int,
            min_size: int, max_size: int, distractors: int = 0):
    s = image_size
    noise = rng.normal(size=(s, s, 3))
    bg = gaussian_filter(noise, sigma=(3, 3, 0))
    bg = bg / (bg.std() + 1e-12) * 0.08 + rng.uniform(0.3, 0.7, size=3)
    img = np.clip(bg, 0.0, 1.0)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    boxes, labels = [], []
    placed: list[tuple] = []

    def place(kind: str):
        w = float(rng.integers(min_size, max_size + 1))
        h = float(rng.integers(min_size, max_size + 1))
        x0 = float(rng.integers(0, s - int(w) + 1))
        y0 = float(rng.integers(0, s - int(h) + 1))
        mask = _shape_mask(kind, xx, yy, x0, y0, w, h)
        ys, xs = np.nonzero(mask)
        if len(xs) == 0:
            return None
        box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        if box[2] - box[0] < MIN_SIDE or box[3] - box[1] < MIN_SIDE:
            return None
        # keep instances separated so boxes stay tight to visible pixels
        if any(box[0] < b[2] + 1 and b[0] < box[2] + 1 and box[1] < b[3] + 1 and b[1] < box[3] + 1 for b in placed):
            return None
        local = img[int(box[1]):int(box[3]), int(box[0]):int(box[2])].reshape(-1, 3).mean(axis=0)
        color = rng.uniform(0.0, 1.0, size=3)
        while np.abs(color - local).max() < 0.35:
            color = rng.uniform(0.0, 1.0, size=3)
        img[mask] = color
        placed.append(box)
        return box

    n = int(rng.integers(1, max_shapes + 1))
    attempts = 0
    while len(boxes) < n and attempts < 100:
        attempts += 1
        label = int(rng.integers(0, classes))
        box = place(SHAPE_NAMES[label])
        if box is not None:
            boxes.append(box)
            labels.append(label + 1)
    # unannotated clutter drawn from the kinds that are not target classes
    others = SHAPE_NAMES[classes:]
    if distractors and others:
        k = int(rng.integers(0, distractors + 1))
        drawn, attempts = 0, 0
        while drawn < k and attempts < 100:
            attempts += 1
            drawn += place(others[int(rng.integers(0, len(others)))]) is not None
    pixels = (np.round(img * 255.0) / 255.0).astype(np.float32)
    return pixels, boxes, labels


def generate_dataset(seed: int, count: int, image_size: int = 64, classes: int = 3, max_shapes: int = 4,
                     min_size: int = 12, max_size: int = 28, id_offset: int = 0,
                     distractors: int = 0) -> list[ImageSample]:
    """Deterministic list of ``count`` HUMAN-annotated samples.

    ``distractors`` caps the number of unannotated shapes per image drawn from
    the kinds beyond ``classes``; they act as background clutter.

    Image ``i`` draws from its own stream seeded by ``(seed, i)``, so any
    prefix of a larger dataset equals the smaller one.
    """
    if count <= 0:
        raise ConfigError(f"count must be positive, got {count}")
    if image_size < 64:
        raise ConfigError(f"image_size must be >= 64, got {image_size}")
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ConfigError(f"classes must be in [1, {len(SHAPE_NAMES)}], got {classes}")
    if max_shapes < 1 or not MIN_SIDE + 2 <= min_size <= max_size <= image_size // 2:
        raise ConfigError("need max_shapes >= 1 and 10 <= min_size <= max_size <= image_size / 2")
    if distractors < 0:
        raise ConfigError(f"distractors must be >= 0, got {distractors}")
    out = []
    for i in range(id_offset, id_offset + count):
        rng = np.random.default_rng([seed, i])
        pixels, boxes, labels = _render(rng, image_size, classes, max_shapes, min_size, max_size, distractors)
        ann = AnnotationSet.from_labels(boxes, labels, classes)
        out.append(ImageSample(f"img{i:06d}", pixels, ann))
    return out


def split_dataset(samples: Iterable[ImageSample] | Iterable[str], labeled_fraction: float, seed: int) -> DatasetSplit:
    ids = [s.id if isinstance(s, ImageSample) else s for s in samples]
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_l = int(math.floor(labeled_fraction * len(ids) + 0.5))
    perm = np.random.default_rng(seed).permutation(len(ids))
    labeled = frozenset(ids[k] for k in perm[:n_l])
    return DatasetSplit(labeled, frozenset(ids) - labeled)


def make_dataset(seed: int, count: int, labeled_fraction: float, heldout: int = 0, image_size: int = 64,
                 classes: int = 3, max_shapes: int = 4, **kw) -> Dataset:
    """Training pool split into labeled/unlabeled, plus ``heldout`` extra test images."""
    pool = generate_dataset(seed, count, image_size, classes, max_shapes, **kw)
    split = split_dataset(pool, labeled_fraction, seed)
    test = generate_dataset(seed, heldout, image_size, classes, max_shapes, id_offset=count, **kw) if heldout else []
    split = DatasetSplit(split.labeled_ids, split.unlabeled_ids, frozenset(s.id for s in test))
    samples = {s.id: s for s in pool + test}
    return Dataset(list(SHAPE_NAMES[:classes]), samples, split)


# --- persistence ----------------------------------------------------------------


def _num(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for sid in ds.ids():
        s = ds.samples[sid]
        Image.fromarray(np.round(s.pixels * 255.0).astype(np.uint8), "RGB").save(root / "images" / f"{sid}.png")
        ann = s.annotations
        records.append({
            "id": sid,
            "width": s.width,
            "height": s.height,
            "boxes": [[_num(v) for v in b] for b in ann.boxes],
            "labels": [int(c) for c in ann.labels],
        })
    doc = {
        "classes": ds.class_names,
        "samples": records,
        "split": {
            "labeled": ds.labeled_ids(),
            "unlabeled": ds.unlabeled_ids(),
            "heldout": ds.heldout_ids(),
        },
    }
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        doc = json.loads((root / "annotations.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetParseError(f"{root}: annotations.json not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{root / 'annotations.json'}: malformed JSON at line {exc.lineno} col {exc.colno}") from exc
    try:
        classes = [str(c) for c in doc["classes"]]
        records = doc["samples"]
        split_doc = doc["split"]
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(f"annotations.json: missing top-level key {exc}") from exc
    samples: dict[str, ImageSample] = {}
    for k, rec in enumerate(records):
        where = f"sample #{k} ({rec.get('id', '?') if isinstance(rec, dict) else '?'})"
        try:
            sid = rec["id"]
            boxes = [[float(v) for v in b] for b in rec["boxes"]]
            labels = [int(c) for c in rec["labels"]]
            if len(boxes) != len(labels) or any(len(b) != 4 for b in boxes):
                raise ValueError("boxes/labels shape mismatch")
            if any(not 1 <= c <= len(classes) for c in labels):
                raise ValueError("label out of range")
            with Image.open(root / "images" / f"{sid}.png") as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            if pixels.shape[:2] != (int(rec["height"]), int(rec["width"])):
                raise ValueError("image size does not match record")
            for b in boxes:
                if not (0 <= b[0] < b[2] <= pixels.shape[1] and 0 <= b[1] < b[3] <= pixels.shape[0]):
                    raise ValueError(f"box {b} outside image bounds")
            ann = AnnotationSet.from_labels(boxes, labels, len(classes))
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise DatasetParseError(f"annotations.json: bad {where}: {exc}") from exc
        samples[sid] = ImageSample(sid, pixels, ann)
    try:
        split = DatasetSplit(
            frozenset(split_doc["labeled"]),
            frozenset(split_doc["unlabeled"]),
            frozenset(split_doc.get("heldout", [])),
        )
        return Dataset(classes, samples, split, list(samples))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"annotations.json: bad split record: {exc}") from exc
