"""Annotation-aware weak and strong augmentation.

Weak: random horizontal flip. Strong: brightness/contrast jitter plus cutout,
followed by at most one of Mixup or Mosaic with a labeled partner image.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import cv2
import numpy as np

from .boxgeom import Box, clip_boxes, hflip_box, scale_boxes, translate_boxes, valid_mask
from .config import AugmentConfig
from .synthdata import AnnotationSet, ImageSample, Source

MOSAIC_MIN_AREA = 16.0


class MixKind(str, Enum):
    NONE = "none"
    MIXUP = "mixup"
    MOSAIC_H = "mosaic_h"
    MOSAIC_V = "mosaic_v"


@dataclass(frozen=True)
class AugmentationRecord:
    flipped: bool = False
    jitter_params: tuple[float, float] = (0.0, 1.0)  # (brightness shift, contrast factor)
    cutout_rect: Box | None = None
    mix_kind: MixKind = MixKind.NONE
    lambda_m: float | None = None
    partner_id: str | None = None

    def __post_init__(self):
        if (self.lambda_m is not None) != (self.mix_kind == MixKind.MIXUP):
            raise ValueError("lambda_m is set exactly when mix_kind is MIXUP")


def hflip(sample: ImageSample) -> ImageSample:
    pixels = np.ascontiguousarray(sample.pixels[:, ::-1])
    ann = sample.annotations
    if ann is not None:
        ann = AnnotationSet(hflip_box(ann.boxes, sample.width), ann.class_weights.copy(), ann.source,
                            ann.confidences.copy())
    return ImageSample(sample.id, pixels, ann)


def weak_augment(sample: ImageSample, rng: np.random.Generator) -> tuple[ImageSample, AugmentationRecord]:
    flip = bool(rng.random() < 0.5)
    out = hflip(sample) if flip else sample
    return out, AugmentationRecord(flipped=flip)


def _color_cutout(sample: ImageSample, config: AugmentConfig, rng: np.random.Generator):
    brightness = float(rng.uniform(*config.brightness))
    contrast = float(rng.uniform(*config.contrast))
    px = sample.pixels.astype(np.float64)
    mean = px.mean()
    px = np.clip((px - mean) * contrast + mean + brightness, 0.0, 1.0)
    rect = None
    if rng.random() < config.p_cutout:
        h, w = px.shape[:2]
        cw = max(1, int(round(rng.uniform(*config.cutout_frac) * w)))
        ch = max(1, int(round(rng.uniform(*config.cutout_frac) * h)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        px[y0:y0 + ch, x0:x0 + cw] = px.reshape(-1, 3).mean(axis=0)
        rect = Box(float(x0), float(y0), float(x0 + cw), float(y0 + ch))
    ann = sample.annotations.copy() if sample.annotations is not None else None
    return ImageSample(sample.id, px.astype(np.float32), ann), (brightness, contrast), rect


def color_cutout(sample: ImageSample, config: AugmentConfig, rng: np.random.Generator) -> ImageSample:
    """Brightness/contrast jitter and one mean-filled cutout; boxes untouched."""
    return _color_cutout(sample, config, rng)[0]


def resize_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    if pixels.shape[:2] == (height, width):
        return pixels
    return cv2.resize(pixels.astype(np.float32), (width, height), interpolation=cv2.INTER_AREA)


def _resized(sample: ImageSample, height: int, width: int) -> ImageSample:
    if (sample.height, sample.width) == (height, width):
        return sample
    ann = sample.annotations
    if ann is not None:
        boxes = scale_boxes(ann.boxes, width / sample.width, height / sample.height)
        ann = AnnotationSet(boxes, ann.class_weights.copy(), ann.source, ann.confidences.copy())
    return ImageSample(sample.id, resize_pixels(sample.pixels, height, width), ann)


def _annotations_or_empty(sample: ImageSample, num_classes: int) -> AnnotationSet:
    if sample.annotations is None:
        return AnnotationSet.empty(num_classes)
    return sample.annotations


def mixup(unlabeled: ImageSample, labeled: ImageSample, alpha_m: float, rng: np.random.Generator | None = None,
          lam: float | None = None) -> ImageSample:
    """Blend two images; keep both box sets with weights scaled by ``lam`` / ``1 - lam``.

    ``lam`` is drawn from ``Beta(alpha_m, alpha_m)`` unless given.
    """
    if lam is None:
        lam = float(rng.beta(alpha_m, alpha_m))
    partner = _resized(labeled, unlabeled.height, unlabeled.width)
    if partner.pixels.shape != unlabeled.pixels.shape:
        raise RuntimeError(f"mixup shape mismatch {partner.pixels.shape} vs {unlabeled.pixels.shape}")
    pixels = lam * unlabeled.pixels.astype(np.float64) + (1.0 - lam) * partner.pixels.astype(np.float64)
    pl = partner.annotations
    pu = _annotations_or_empty(unlabeled, pl.num_classes)
    ann = AnnotationSet(
        np.concatenate([pu.boxes, pl.boxes]),
        np.concatenate([lam * pu.class_weights, (1.0 - lam) * pl.class_weights]),
        Source.MIXED,
        np.concatenate([pu.confidences, pl.confidences]),
    )
    return ImageSample(unlabeled.id, pixels.astype(np.float32), ann)


def mosaic(unlabeled: ImageSample, labeled: ImageSample, kind: MixKind) -> ImageSample:
    """Tile the unlabeled image (left/top) and the labeled one (right/bottom) on
    a canvas the size of the unlabeled image."""
    H, W = unlabeled.height, unlabeled.width
    num_classes = labeled.annotations.num_classes
    if kind == MixKind.MOSAIC_H:
        w1 = W // 2
        tiles = [(unlabeled, H, w1, 0, 0), (labeled, H, W - w1, w1, 0)]
    elif kind == MixKind.MOSAIC_V:
        h1 = H // 2
        tiles = [(unlabeled, h1, W, 0, 0), (labeled, H - h1, W, 0, h1)]
    else:
        raise ValueError(f"not a mosaic kind: {kind}")
    canvas = np.empty_like(unlabeled.pixels)
    boxes, weights, confs = [], [], []
    for sample, th, tw, dx, dy in tiles:
        canvas[dy:dy + th, dx:dx + tw] = resize_pixels(sample.pixels, th, tw)
        ann = _annotations_or_empty(sample, num_classes)
        b = scale_boxes(ann.boxes, tw / sample.width, th / sample.height)
        b = translate_boxes(b, dx, dy)
        b = clip_boxes(b, dx + tw, dy + th)
        keep = valid_mask(b, MOSAIC_MIN_AREA)
        boxes.append(b[keep])
        weights.append(ann.class_weights[keep])
        confs.append(ann.confidences[keep])
    ann = AnnotationSet(np.concatenate(boxes), np.concatenate(weights), Source.MIXED, np.concatenate(confs))
    return ImageSample(unlabeled.id, canvas, ann)


def strong_augment(unlabeled: ImageSample, partner: ImageSample, config: AugmentConfig,
                   rng: np.random.Generator) -> tuple[ImageSample, AugmentationRecord]:
    """Colour jitter + cutout, then nothing / Mixup / Mosaic per configured odds.

    ``unlabeled`` must already carry its pseudo annotations (possibly empty);
    ``partner`` is a labeled sample and is never modified.
    """
    out, jitter, rect = _color_cutout(unlabeled, config, rng)
    u = rng.random()
    lam = None
    if u < config.p_none:
        kind = MixKind.NONE
    elif u < config.p_none + config.p_mixup:
        kind = MixKind.MIXUP
        lam = float(rng.beta(config.alpha_m, config.alpha_m))
        out = mixup(out, partner, config.alpha_m, lam=lam)
    else:
        kind = MixKind.MOSAIC_H if rng.random() < 0.5 else MixKind.MOSAIC_V
        out = mosaic(out, partner, kind)
    record = AugmentationRecord(
        flipped=False,
        jitter_params=jitter,
        cutout_rect=rect,
        mix_kind=kind,
        lambda_m=lam,
        partner_id=partner.id if kind != MixKind.NONE else None,
    )
    return out, record
