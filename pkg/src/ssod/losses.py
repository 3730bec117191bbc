"""Anchor assignment and the supervised / unsupervised / total detection losses.

Classification is weighted cross-entropy averaged over the anchors that enter
the sum (positives plus sampled negatives); regression is an L1 on deltas of
positive anchors, scaled by ``lambda_reg`` and averaged over those anchors.
Both normalisers are counted over the whole batch half.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .boxgeom import encode_delta, iou_matrix
from .detector import DetectorState, forward
from .synthdata import AnnotationSet

NEGATIVE = -1
IGNORE = -2


class TrainingError(RuntimeError):
    pass


@dataclass
class AssignmentResult:
    labels: np.ndarray  # per anchor: matched target index, NEGATIVE or IGNORE
    weights: np.ndarray  # per anchor loss weight (target weight mass for positives)
    max_iou: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE


def assign_targets(anchors, annotations: AnnotationSet | None, pos_iou: float = 0.5,
                   neg_iou: float = 0.4) -> AssignmentResult:
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    anchors = np.asarray(anchors, dtype=np.float64)
    k = len(anchors)
    if annotations is None or len(annotations) == 0:
        return AssignmentResult(np.full(k, NEGATIVE), np.ones(k), np.zeros(k))
    ious = iou_matrix(anchors, annotations.boxes)
    best_target = ious.argmax(axis=1)  # first maximum -> lower target index
    max_iou = ious[np.arange(k), best_target]
    labels = np.full(k, IGNORE)
    labels[max_iou < neg_iou] = NEGATIVE
    pos = max_iou >= pos_iou
    labels[pos] = best_target[pos]
    for j in range(len(annotations)):
        labels[int(ious[:, j].argmax())] = j
    target_w = annotations.weights
    weights = np.where(labels >= 0, target_w[np.maximum(labels, 0)], np.where(labels == NEGATIVE, 1.0, 0.0))
    return AssignmentResult(labels, weights, max_iou)


@dataclass
class Targets:
    """Dense per-anchor training targets for a stack of images, shape ``(N, K, ...)``.

    ``cls_weight`` is zero for anchors outside the classification sum and
    ``cls_mask`` marks anchors that enter it (zero-weight positives included).
    """

    cls_index: np.ndarray
    cls_weight: np.ndarray
    cls_mask: np.ndarray
    reg_target: np.ndarray
    reg_weight: np.ndarray
    reg_mask: np.ndarray
    confidence: np.ndarray

    @classmethod
    def stack(cls, items: list["Targets"]) -> "Targets":
        return cls(**{f: np.concatenate([getattr(t, f) for t in items]) for f in cls.__dataclass_fields__})

    def __len__(self) -> int:
        return len(self.cls_index)


def build_targets(anchors, annotations: AnnotationSet | None, assignment: AssignmentResult,
                  neg_ratio: int | None = 3, rng: np.random.Generator | None = None) -> Targets:
    """Targets for one image. Negatives are capped at ``neg_ratio`` x positives
    (random subset); ``neg_ratio=None`` keeps all negatives."""
    anchors = np.asarray(anchors, dtype=np.float64)
    k = len(anchors)
    pos = assignment.positive
    neg = assignment.negative
    n_pos = int(pos.sum())
    if neg_ratio is not None:
        cap = neg_ratio * n_pos
        neg_idx = np.flatnonzero(neg)
        if len(neg_idx) > cap:
            chosen = rng.choice(neg_idx, size=cap, replace=False) if cap else np.zeros(0, dtype=int)
            neg = np.zeros(k, dtype=bool)
            neg[chosen] = True
    cls_mask = pos | neg
    cls_index = np.zeros(k, dtype=np.int64)
    reg_target = np.zeros((k, 4))
    confidence = np.zeros(k)
    if n_pos:
        matched = assignment.labels[pos]
        cls_index[pos] = annotations.labels[matched]
        reg_target[pos] = encode_delta(anchors[pos], annotations.boxes[matched])
        confidence[pos] = annotations.confidences[matched]
    w = np.where(cls_mask, assignment.weights, 0.0)
    return Targets(cls_index[None], w[None], cls_mask[None], reg_target[None],
                   np.where(pos, assignment.weights, 0.0)[None], pos[None], confidence[None])


def image_targets(anchors, annotations, pos_iou, neg_iou, neg_ratio, rng) -> Targets:
    return build_targets(anchors, annotations, assign_targets(anchors, annotations, pos_iou, neg_iou),
                         neg_ratio, rng)


@dataclass
class LossBreakdown:
    total: float = 0.0
    sup: float = 0.0
    unsup: float = 0.0
    sup_cls: float = 0.0
    sup_reg: float = 0.0
    unsup_cls: float = 0.0
    unsup_reg: float = 0.0
    n_cls_sup: int = 0
    n_reg_sup: int = 0
    n_cls_unsup: int = 0
    n_reg_unsup: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _detection_loss(logits: torch.Tensor, deltas: torch.Tensor, targets: Targets, lambda_reg: float,
                    reg_mask: np.ndarray | None = None):
    reg_mask = targets.reg_mask if reg_mask is None else reg_mask
    n_cls = int(targets.cls_mask.sum())
    n_reg = int(reg_mask.sum())
    dt = logits.dtype
    if n_cls:
        m = torch.from_numpy(targets.cls_mask)
        ce = F.cross_entropy(logits[m], torch.from_numpy(targets.cls_index[targets.cls_mask]), reduction="none")
        cls = (torch.from_numpy(targets.cls_weight[targets.cls_mask]).to(dt) * ce).sum() / n_cls
    else:
        cls = logits.sum() * 0.0
    if n_reg:
        m = torch.from_numpy(reg_mask)
        l1 = (deltas[m] - torch.from_numpy(targets.reg_target[reg_mask]).to(dt)).abs().sum(dim=1)
        reg = lambda_reg * (torch.from_numpy(targets.reg_weight[reg_mask]).to(dt) * l1).sum() / n_reg
    else:
        reg = deltas.sum() * 0.0
    return cls, reg, n_cls, n_reg


def supervised_loss(logits: torch.Tensor, deltas: torch.Tensor, targets: Targets, lambda_reg: float = 1.0):
    """``(cls, reg, n_cls, n_reg)``; empty sums give exact zeros."""
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be >= 0")
    return _detection_loss(logits, deltas, targets, lambda_reg)


def unsupervised_loss(logits: torch.Tensor, deltas: torch.Tensor, targets: Targets, lambda_reg: float = 1.0,
                      tau: float = 0.9):
    """As :func:`supervised_loss` on pseudo targets, except a positive's regression
    term is kept only when its target's labeling-time confidence is >= ``tau``."""
    gate = targets.reg_mask & (targets.confidence >= tau)
    return _detection_loss(logits, deltas, targets, lambda_reg, reg_mask=gate)


def total_loss(sup, unsup, lambda_u: float):
    if lambda_u < 0:
        raise ValueError("lambda_u must be >= 0")
    return sup + lambda_u * unsup


@dataclass
class TrainBatch:
    labeled_pixels: np.ndarray
    labeled_targets: Targets
    unlabeled_pixels: np.ndarray | None = None
    unlabeled_targets: Targets | None = None


def gradients(state: DetectorState, batch: TrainBatch, lambda_reg: float = 1.0, lambda_u: float = 1.0,
              tau: float = 0.9) -> tuple[list[torch.Tensor], LossBreakdown]:
    """Gradient of ``sup + lambda_u * unsup`` w.r.t. every parameter.

    The two branches are differentiated separately and summed, so with
    ``lambda_u == 0`` the result is exactly the supervised gradient.
    """
    params = [p.detach().requires_grad_(True) for p in state.params]
    live = DetectorState(state.arch, params, state.init_seed)
    raw = forward(live, batch.labeled_pixels)
    s_cls, s_reg, n_cs, n_rs = supervised_loss(raw.logits, raw.deltas, batch.labeled_targets, lambda_reg)
    sup = s_cls + s_reg
    grads = list(torch.autograd.grad(sup, params))
    bd = LossBreakdown(sup=sup.item(), sup_cls=s_cls.item(), sup_reg=s_reg.item(), n_cls_sup=n_cs, n_reg_sup=n_rs)
    if batch.unlabeled_pixels is not None and len(batch.unlabeled_pixels):
        raw_u = forward(live, batch.unlabeled_pixels)
        u_cls, u_reg, n_cu, n_ru = unsupervised_loss(raw_u.logits, raw_u.deltas, batch.unlabeled_targets,
                                                     lambda_reg, tau)
        unsup = u_cls + u_reg
        bd.unsup, bd.unsup_cls, bd.unsup_reg = unsup.item(), u_cls.item(), u_reg.item()
        bd.n_cls_unsup, bd.n_reg_unsup = n_cu, n_ru
        if lambda_u != 0 and unsup.requires_grad and (n_cu or n_ru):
            g_u = torch.autograd.grad(unsup, params, allow_unused=True)
            grads = [g if gu is None else g + lambda_u * gu for g, gu in zip(grads, g_u)]
    bd.total = float(total_loss(bd.sup, bd.unsup, lambda_u))
    if not np.isfinite(bd.total):
        raise TrainingError(f"non-finite loss: {bd.as_dict()}")
    return grads, bd
