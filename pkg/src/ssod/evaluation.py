"""COCO-style AP at IoU 0.50, 0.75 and the 0.50:0.95 mean, plus pseudo-label quality."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxgeom import iou_matrix
from .config import ConfigError
from .detector import DetectorState, detect_batch
from .synthdata import AnnotationSet, ImageSample
from .teaching import corectify_pseudo_label_batch

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    map_5095: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    n_images: int = 0
    n_gt: int = 0
    n_dets: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _as_triplets(dets):
    """Accept detector output or ``(box, score, label)`` tuples."""
    out = []
    for d in dets:
        if hasattr(d, "box"):
            out.append((np.asarray(d.box, dtype=np.float64), float(d.confidence), int(d.label)))
        else:
            box, score, label = d
            out.append((np.asarray(box, dtype=np.float64), float(score), int(label)))
    return out


def _gt_arrays(gt):
    if isinstance(gt, AnnotationSet):
        return gt.boxes, gt.labels
    boxes, labels = gt
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64).reshape(-1)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a confidence-ordered TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


def average_precision(detections, ground_truth, iou_threshold: float) -> dict[int, float]:
    """Per-class AP over a set of images; classes without GT are omitted.

    Detections are matched greedily in descending confidence (ties keep input
    order); each goes to the highest-IoU unmatched GT of its class.
    """
    dets = [_as_triplets(d) for d in detections]
    gts = [_gt_arrays(g) for g in ground_truth]
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth cover different image counts")
    classes = sorted({int(c) for _, labels in gts for c in labels})
    result = {}
    for c in classes:
        pool = [(score, i, j, box) for i, d in enumerate(dets) for j, (box, score, lab) in enumerate(d) if lab == c]
        pool.sort(key=lambda t: (-t[0], t[1], t[2]))
        gt_boxes = [b[labels == c] for b, labels in gts]
        matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(pool), dtype=bool)
        for k, (_, i, _, box) in enumerate(pool):
            if len(gt_boxes[i]) == 0:
                continue
            ious = iou_matrix(box, gt_boxes[i])[0]
            ious[matched[i]] = -1.0
            best = int(ious.argmax())
            if ious[best] >= iou_threshold:
                matched[i][best] = True
                tp[k] = True
        result[c] = interpolated_ap(tp, sum(len(b) for b in gt_boxes))
    return result


def evaluate_detections(detections, ground_truth) -> EvalResult:
    if len(ground_truth) == 0:
        raise ConfigError("empty evaluation set")
    per_thr = [average_precision(detections, ground_truth, t) for t in IOU_THRESHOLDS]
    classes = sorted(per_thr[0])
    n_gt = sum(len(_gt_arrays(g)[1]) for g in ground_truth)
    n_dets = sum(len(d) for d in detections)
    if not classes:
        return EvalResult(0.0, 0.0, 0.0, {}, len(ground_truth), 0, n_dets)
    mean_at = [float(np.mean([p[c] for c in classes])) for p in per_thr]
    per_class = {c: float(np.mean([p[c] for p in per_thr])) for c in classes}
    return EvalResult(mean_at[0], mean_at[5], float(np.mean(mean_at)), per_class, len(ground_truth), n_gt, n_dets)


def _chunks(items, size=64):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate(state: DetectorState, eval_samples: list[ImageSample], score_threshold: float = 0.001,
             nms_iou: float = 0.5) -> EvalResult:
    """Detect on un-augmented images and score against their annotations."""
    if not eval_samples:
        raise ConfigError("empty evaluation set")
    if any(s.annotations is None for s in eval_samples):
        raise ConfigError("evaluation samples need annotations")
    dets = []
    for chunk in _chunks(eval_samples):
        dets.extend(detect_batch(state, chunk, score_threshold, nms_iou))
    return evaluate_detections(dets, [s.annotations for s in eval_samples])


def pseudo_quality(model, samples_with_oracle_gt: list[ImageSample], tau: float = 0.9, nms_iou: float = 0.5,
                   candidate_floor: float = 0.05, refine_mode: str = "cell") -> EvalResult:
    """AP of the pseudo boxes (confidence >= ``tau``) a labeler would emit.

    ``model`` is a single state, or a ``(model_a, model_b)`` pair whose
    co-rectified labels for model_a are scored.
    """
    if not samples_with_oracle_gt:
        raise ConfigError("empty evaluation set")
    dets = []
    for chunk in _chunks(samples_with_oracle_gt):
        if isinstance(model, tuple):
            sets = corectify_pseudo_label_batch(model[0], model[1], chunk, tau, nms_iou, candidate_floor, refine_mode)
            dets.extend([list(zip(p.boxes, p.confidences, p.hard_labels)) for p in sets])
        else:
            dets.extend(detect_batch(model, chunk, tau, nms_iou))
    return evaluate_detections(dets, [s.annotations for s in samples_with_oracle_gt])
