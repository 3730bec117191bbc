"""Axis-aligned box algebra: IoU, NMS, flips, clipping and the delta codec.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Functions
accept either a single box (sequence of 4) or an ``(N, 4)`` array.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def make(cls, x1, y1, x2, y2) -> "Box":
        x1, y1, x2, y2 = float(x1), float(y1), float(x2), float(y2)
        if not (np.isfinite([x1, y1, x2, y2]).all() and x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box ({x1}, {y1}, {x2}, {y2})")
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


class BoxDelta(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou(a, b) -> float:
    """IoU of two single boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = as_boxes(a)
    b = as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter / union


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy NMS. Returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``. Equal scores keep input order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(b) == 0:
        return []
    order = np.argsort(-s, kind="stable")
    ious = iou_matrix(b, b)
    suppressed = np.zeros(len(b), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return keep


def batched_nms(boxes, scores, labels, iou_threshold: float) -> list[int]:
    """Class-wise NMS; the merged result is ordered by descending score."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    b = as_boxes(boxes)
    keep: list[int] = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        keep.extend(int(idx[k]) for k in nms(b[idx], s[idx], iou_threshold))
    keep.sort(key=lambda i: (-s[i], i))
    return keep


def hflip_box(b, image_width: float):
    """Mirror a box (or array of boxes) about the vertical image axis."""
    arr = np.asarray(b, dtype=np.float64)
    out = arr.copy()
    out[..., 0] = image_width - arr[..., 2]
    out[..., 2] = image_width - arr[..., 0]
    if isinstance(b, Box):
        return Box(*out.tolist())
    return out


def vflip_box(b, image_height: float):
    arr = np.asarray(b, dtype=np.float64)
    out = arr.copy()
    out[..., 1] = image_height - arr[..., 3]
    out[..., 3] = image_height - arr[..., 1]
    return out


def scale_boxes(boxes, sx: float, sy: float) -> np.ndarray:
    return as_boxes(boxes) * np.array([sx, sy, sx, sy])


def translate_boxes(boxes, dx: float, dy: float) -> np.ndarray:
    return as_boxes(boxes) + np.array([dx, dy, dx, dy])


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, height)
    return b


def valid_mask(boxes, min_area: float = 0.0) -> np.ndarray:
    b = as_boxes(boxes)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return (w > 0) & (h > 0) & (w * h >= min_area)


def _centers(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode_delta(anchors, targets) -> np.ndarray:
    """Center/size parameterisation ``(tx, ty, tw, th)`` of targets w.r.t. anchors."""
    single = np.ndim(anchors) == 1 and np.ndim(targets) == 1
    a = as_boxes(anchors)
    t = as_boxes(targets)
    ax, ay, aw, ah = _centers(a)
    tx, ty, tw, th = _centers(t)
    d = np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)
    return BoxDelta(*d[0].tolist()) if single else d


# keeps exp() finite for wild predictions; ratio limit of 1000/16 as in common detectors
MAX_LOG_RATIO = float(np.log(1000.0 / 16.0))


def decode_delta(anchors, deltas, bounds: Sequence[float] | None = None) -> np.ndarray:
    """Inverse of :func:`encode_delta`. ``bounds=(W, H)`` clips the result."""
    single = np.ndim(anchors) == 1 and np.ndim(deltas) == 1
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _centers(a)
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(np.clip(d[:, 2], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    h = ah * np.exp(np.clip(d[:, 3], -MAX_LOG_RATIO, MAX_LOG_RATIO))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if bounds is not None:
        out = clip_boxes(out, bounds[0], bounds[1])
    return Box(*out[0].tolist()) if single else out
