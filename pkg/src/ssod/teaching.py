"""Per-iteration pseudo labeling, single-model and co-rectified.

Co-rectify: the labeling model proposes boxes; the partner model re-scores
them; class vectors are averaged and boxes averaged with the two models'
foreground confidences as weights. Suppression and the confidence gate act
on the fused detections.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .boxgeom import Box, batched_nms
from .detector import Detection, DetectorState, detect_batch, refine_batch
from .synthdata import AnnotationSet, ImageSample, Source


class Generator(str, Enum):
    SINGLE = "single"
    CORECTIFY = "corectify"


class DegenerateInputError(ValueError):
    pass


@dataclass
class PseudoLabelSet:
    image_id: str
    boxes: np.ndarray
    hard_labels: np.ndarray
    confidences: np.ndarray
    generator: Generator = Generator.SINGLE

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.hard_labels = np.asarray(self.hard_labels, dtype=np.int64).reshape(-1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if not len(self.boxes) == len(self.hard_labels) == len(self.confidences):
            raise ValueError("pseudo label lists differ in length")
        if (self.hard_labels < 1).any():
            raise ValueError("pseudo labels must be foreground classes")

    def __len__(self) -> int:
        return len(self.boxes)

    def to_annotations(self, num_classes: int) -> AnnotationSet:
        return AnnotationSet.from_labels(self.boxes, self.hard_labels, num_classes, Source.PSEUDO, self.confidences)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "generator": self.generator.value,
            "boxes": self.boxes.tolist(),
            "labels": self.hard_labels.tolist(),
            "confidences": self.confidences.tolist(),
        }


def _from_detections(image_id: str, dets: list[Detection], generator: Generator) -> PseudoLabelSet:
    return PseudoLabelSet(
        image_id,
        [list(d.box) for d in dets],
        [d.label for d in dets],
        [d.confidence for d in dets],
        generator,
    )


def pseudo_label_batch(state: DetectorState, images: list[ImageSample], tau: float,
                       nms_iou: float) -> list[PseudoLabelSet]:
    dets = detect_batch(state, images, tau, nms_iou)
    return [_from_detections(im.id, d, Generator.SINGLE) for im, d in zip(images, dets)]


def pseudo_label(state: DetectorState, weak_image: ImageSample, tau: float, nms_iou: float) -> PseudoLabelSet:
    """Detections with confidence >= ``tau`` as hard-labeled pseudo boxes."""
    return pseudo_label_batch(state, [weak_image], tau, nms_iou)[0]


@dataclass
class RectifiedDetection:
    probs_a: np.ndarray
    box_a: Box
    probs_b: np.ndarray
    box_b: Box
    fused_probs: np.ndarray
    fused_box: Box

    @property
    def confidence(self) -> float:
        return float(self.fused_probs[1:].max())

    @property
    def label(self) -> int:
        return int(self.fused_probs[1:].argmax() + 1)


def corectify_fuse(a: Detection | tuple, b_refined: tuple) -> RectifiedDetection:
    """Average the class vectors; confidence-weighted average of the boxes.

    The box weights are each vector's largest foreground probability.
    """
    if isinstance(a, Detection):
        probs_a, box_a = np.asarray(a.class_probs, dtype=np.float64), a.box
    else:
        probs_a, box_a = np.asarray(a[0], dtype=np.float64), a[1]
    probs_b, box_b = np.asarray(b_refined[0], dtype=np.float64), b_refined[1]
    ca = float(probs_a[1:].max())
    cb = float(probs_b[1:].max())
    if ca + cb <= 0.0:
        raise DegenerateInputError("both confidences are zero; cannot weight boxes")
    ta = np.asarray(box_a, dtype=np.float64)
    tb = np.asarray(box_b, dtype=np.float64)
    fused_box = (ta * ca + tb * cb) / (ca + cb)
    # a convex combination; clamp rounding drift so the interval property is exact
    fused_box = np.clip(fused_box, np.minimum(ta, tb), np.maximum(ta, tb))
    return RectifiedDetection(probs_a, Box(*ta.tolist()), probs_b, Box(*tb.tolist()),
                              0.5 * (probs_a + probs_b), Box(*fused_box.tolist()))


def corectify_pseudo_label_batch(state_self: DetectorState, state_partner: DetectorState,
                                 images: list[ImageSample], tau: float, nms_iou: float,
                                 candidate_floor: float = 0.05, refine_mode: str = "cell"
                                 ) -> list[PseudoLabelSet]:
    cands = detect_batch(state_self, images, candidate_floor, None)
    refined = refine_batch(state_partner, images, [[list(d.box) for d in c] for c in cands], refine_mode)
    out = []
    for im, cs, rs in zip(images, cands, refined):
        fused = [corectify_fuse(c, r) for c, r in zip(cs, rs)]
        fused = [f for f in fused if f.fused_box.x2 > f.fused_box.x1 and f.fused_box.y2 > f.fused_box.y1]
        if fused:
            scores = np.array([f.confidence for f in fused])
            keep = batched_nms([list(f.fused_box) for f in fused], scores, [f.label for f in fused], nms_iou)
            fused = [fused[k] for k in keep if fused[k].confidence >= tau]
        out.append(PseudoLabelSet(
            im.id,
            [list(f.fused_box) for f in fused],
            [f.label for f in fused],
            [f.confidence for f in fused],
            Generator.CORECTIFY,
        ))
    return out


def corectify_pseudo_label(state_self: DetectorState, state_partner: DetectorState, weak_image: ImageSample,
                           tau: float, nms_iou: float, candidate_floor: float = 0.05,
                           refine_mode: str = "cell") -> PseudoLabelSet:
    return corectify_pseudo_label_batch(state_self, state_partner, [weak_image], tau, nms_iou,
                                        candidate_floor, refine_mode)[0]
