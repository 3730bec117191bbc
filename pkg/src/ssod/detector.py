"""A small single-stage anchor detector written against ``torch.nn.functional``.

Parameters live in a flat list of tensors so two models, their momentum
buffers and checkpoints are plain data. Anchor ``k`` of an image is cell
``k // A`` (row-major over the stride-S grid) and aspect-ratio slot ``k % A``.
Class index 0 is background.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .boxgeom import Box, batched_nms, decode_delta, iou_matrix
from .config import ArchConfig, ConfigError

CHECKPOINT_MAGIC = b"SSODCKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class DetectorState:
    arch: ArchConfig
    params: list[torch.Tensor]
    init_seed: int

    def clone(self) -> "DetectorState":
        return DetectorState(self.arch, [p.detach().clone() for p in self.params], self.init_seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.params])

    @property
    def dtype(self) -> torch.dtype:
        return self.params[0].dtype


@dataclass
class RawOutputs:
    logits: torch.Tensor  # (..., num_anchors, C + 1)
    deltas: torch.Tensor  # (..., num_anchors, 4)


@dataclass
class Detection:
    box: Box
    class_probs: np.ndarray
    confidence: float

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs[1:]) + 1)


def param_shapes(arch: ArchConfig) -> list[tuple[int, ...]]:
    shapes = []
    c_in = 3
    for c in arch.channels:
        shapes += [(c, c_in, 3, 3), (c,)]
        c_in = c
    a, k = arch.num_anchors, arch.num_classes + 1
    shapes += [(a * k, c_in, 1, 1), (a * k,), (a * 4, c_in, 1, 1), (a * 4,)]
    return shapes


def param_count(arch: ArchConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(arch)))


def init(arch: ArchConfig, seed: int, dtype: torch.dtype = torch.float32) -> DetectorState:
    """He-normal backbone, small-normal head, zero biases."""
    if not isinstance(arch, ArchConfig):
        raise ConfigError("init expects an ArchConfig")
    rng = np.random.default_rng([seed, 0x5eed])
    params = []
    shapes = param_shapes(arch)
    n_backbone = 2 * len(arch.channels)
    for i, shape in enumerate(shapes):
        if len(shape) == 1:
            arr = np.zeros(shape)
        elif i < n_backbone:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            arr = rng.normal(0.0, 0.01, size=shape)
        params.append(torch.tensor(arr, dtype=dtype))
    return DetectorState(arch, params, seed)


def grid_shape(arch: ArchConfig, height: int, width: int) -> tuple[int, int]:
    s = arch.stride
    if height % s or width % s:
        raise ShapeError(f"image size {height}x{width} must be a multiple of stride {s}")
    return height // s, width // s


def anchor_shapes(arch: ArchConfig) -> np.ndarray:
    """(A, 2) anchor widths and heights."""
    r = np.asarray(arch.aspect_ratios, dtype=np.float64)
    return np.stack([arch.anchor_size / np.sqrt(r), arch.anchor_size * np.sqrt(r)], axis=1)


def make_anchors(arch: ArchConfig, height: int, width: int) -> np.ndarray:
    gh, gw = grid_shape(arch, height, width)
    s = arch.stride
    cy, cx = np.meshgrid((np.arange(gh) + 0.5) * s, (np.arange(gw) + 0.5) * s, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
    half = anchor_shapes(arch)[None, :, :] / 2
    return np.concatenate([centers - half, centers + half], axis=2).reshape(-1, 4)


def _to_tensor(pixels, dtype) -> torch.Tensor:
    arr = np.asarray(pixels)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype) - 0.5


def features(state: DetectorState, pixels) -> torch.Tensor:
    x = pixels if isinstance(pixels, torch.Tensor) else _to_tensor(pixels, state.dtype)
    grid_shape(state.arch, x.shape[2], x.shape[3])
    p = state.params
    for i, s in enumerate(state.arch.strides):
        x = F.relu(F.conv2d(x, p[2 * i], p[2 * i + 1], stride=s, padding=1))
    return x


def head(state: DetectorState, feats: torch.Tensor) -> RawOutputs:
    n = len(state.arch.channels)
    wc, bc, wr, br = state.params[2 * n:2 * n + 4]
    k = state.arch.num_classes + 1
    cls = F.conv2d(feats, wc, bc).permute(0, 2, 3, 1)
    reg = F.conv2d(feats, wr, br).permute(0, 2, 3, 1)
    b = feats.shape[0]
    return RawOutputs(cls.reshape(b, -1, k), reg.reshape(b, -1, 4))


def forward(state: DetectorState, image) -> RawOutputs:
    """Per-anchor logits and deltas for one image (H x W x 3) or a batch (N x H x W x 3).

    A single image yields ``(num_anchors, ...)`` tensors, a batch ``(N, num_anchors, ...)``.
    """
    pixels = image.pixels if hasattr(image, "pixels") else image
    out = head(state, features(state, pixels))
    if np.ndim(pixels) == 3:
        return RawOutputs(out.logits[0], out.deltas[0])
    return out


def _check_thresholds(**values):
    for name, v in values.items():
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {v}")


def _check_score(score_threshold: float):
    # 0 is allowed so evaluation can keep every foreground anchor
    if not 0.0 <= score_threshold < 1.0:
        raise ConfigError(f"score_threshold must be in [0, 1), got {score_threshold}")


def postprocess(arch: ArchConfig, probs: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
                image_hw: tuple[int, int], score_threshold: float, nms_iou: float | None) -> list[Detection]:
    """Softmax outputs -> detections; ``nms_iou=None`` skips suppression."""
    fg = probs[:, 1:]
    conf = fg.max(axis=1)
    keep = (probs.argmax(axis=1) != 0) & (conf >= score_threshold)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return []
    h, w = image_hw
    boxes = decode_delta(anchors[idx], deltas[idx], bounds=(w, h))
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx, boxes = idx[ok], boxes[ok]
    labels = fg[idx].argmax(axis=1)
    if nms_iou is None:
        kept = sorted(range(len(idx)), key=lambda j: (-conf[idx[j]], j))
    else:
        kept = batched_nms(boxes, conf[idx], labels, nms_iou)
    return [Detection(Box(*boxes[k].tolist()), probs[idx[k]].copy(), float(conf[idx[k]])) for k in kept]


def _softmax_np(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits.detach().to(torch.float64), dim=-1).numpy()


def detect_batch(state: DetectorState, images, score_threshold: float,
                 nms_iou: float | None) -> list[list[Detection]]:
    _check_score(score_threshold)
    if nms_iou is not None:
        _check_thresholds(nms_iou=nms_iou)
    pixels = np.stack([im.pixels if hasattr(im, "pixels") else im for im in images])
    h, w = pixels.shape[1:3]
    anchors = make_anchors(state.arch, h, w)
    with torch.no_grad():
        raw = forward(state, pixels)
    probs = _softmax_np(raw.logits)
    deltas = raw.deltas.detach().to(torch.float64).numpy()
    return [postprocess(state.arch, probs[i], deltas[i], anchors, (h, w), score_threshold, nms_iou)
            for i in range(len(pixels))]


def detect(state: DetectorState, image, score_threshold: float, nms_iou: float) -> list[Detection]:
    """Detections sorted by confidence, class-wise NMS applied."""
    return detect_batch(state, [image], score_threshold, nms_iou)[0]


def _slot_for(arch: ArchConfig, proposals: np.ndarray) -> np.ndarray:
    # aspect-ratio slot whose anchor shape overlaps the proposal best (both centred)
    shapes = anchor_shapes(arch)
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    sized = np.stack([-pw / 2, -ph / 2, pw / 2, ph / 2], axis=1)
    anchors = np.concatenate([-shapes / 2, shapes / 2], axis=1)
    return iou_matrix(sized, anchors).argmax(axis=1)


REFINE_MODES = ("proposal", "cell", "match")


def refine_batch(state: DetectorState, images, proposals_per_image, mode: str = "proposal"):
    """Re-score proposals with this model's head, one ``(class_probs, box)`` per proposal.

    ``proposal``: read the head at the proposal's centre cell, in the anchor
    slot best matching the proposal's shape, and decode the deltas against
    the proposal itself. ``cell``: same read-out, decoded against that cell's
    anchor. ``match``: use the anchor whose own decoded box overlaps the
    proposal most.
    """
    if mode not in REFINE_MODES:
        raise ConfigError(f"refine mode must be one of {REFINE_MODES}, got {mode!r}")
    pixels = np.stack([im.pixels if hasattr(im, "pixels") else im for im in images])
    h, w = pixels.shape[1:3]
    gh, gw = grid_shape(state.arch, h, w)
    s, a = state.arch.stride, state.arch.num_anchors
    anchors = make_anchors(state.arch, h, w)
    with torch.no_grad():
        raw = forward(state, pixels)
    probs = _softmax_np(raw.logits)
    deltas = raw.deltas.detach().to(torch.float64).numpy()
    out = []
    for i, props in enumerate(proposals_per_image):
        props = np.asarray(props, dtype=np.float64).reshape(-1, 4)
        if len(props) == 0:
            out.append([])
            continue
        if mode == "match":
            own = decode_delta(anchors, deltas[i], bounds=(w, h))
            k = iou_matrix(props, own).argmax(axis=1)
            boxes = own[k]
        else:
            cx = (props[:, 0] + props[:, 2]) / 2
            cy = (props[:, 1] + props[:, 3]) / 2
            col = np.clip((cx // s).astype(int), 0, gw - 1)
            row = np.clip((cy // s).astype(int), 0, gh - 1)
            k = (row * gw + col) * a + _slot_for(state.arch, props)
            ref = props if mode == "proposal" else anchors[k]
            boxes = decode_delta(ref, deltas[i, k], bounds=(w, h))
        boxes = _repair(boxes, props)
        out.append([(probs[i, kk].copy(), Box(*b.tolist())) for kk, b in zip(k, boxes)])
    return out


def _repair(boxes: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    # a box clipped to zero size falls back to the proposal
    bad = (boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])
    boxes = boxes.copy()
    boxes[bad] = fallback[bad]
    return boxes


def refine(state: DetectorState, image, proposals, mode: str = "proposal") -> list[tuple[np.ndarray, Box]]:
    if len(proposals) == 0:
        return []
    return refine_batch(state, [image], [proposals], mode)[0]


# --- checkpoint container ---------------------------------------------------------
#
# layout: magic (8 bytes) | version u32 LE | header length u32 LE | UTF-8 JSON header
#         | float32 LE tensors in header["tensors"] order


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    names = list(tensors)
    meta = dict(header)
    meta["tensors"] = [{"name": n, "shape": list(tensors[n].shape)} for n in names]
    blob = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob)
        for n in names:
            f.write(tensors[n].detach().cpu().numpy().astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset = 16 + hlen
    tensors = {}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        end = offset + 4 * n
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at tensor {spec['name']}")
        arr = np.frombuffer(data[offset:end], dtype="<f4").reshape(spec["shape"]).astype(np.float32)
        tensors[spec["name"]] = torch.from_numpy(arr.copy())
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors, header


def state_tensors(prefix: str, state: DetectorState) -> dict[str, torch.Tensor]:
    return {f"{prefix}.param{i}": p for i, p in enumerate(state.params)}


def arch_to_dict(arch: ArchConfig) -> dict:
    return {
        "num_classes": arch.num_classes,
        "channels": list(arch.channels),
        "strides": list(arch.strides),
        "anchor_size": arch.anchor_size,
        "aspect_ratios": list(arch.aspect_ratios),
    }


def arch_from_dict(d: dict) -> ArchConfig:
    return ArchConfig(
        num_classes=int(d["num_classes"]),
        channels=tuple(d["channels"]),
        strides=tuple(d["strides"]),
        anchor_size=float(d["anchor_size"]),
        aspect_ratios=tuple(d["aspect_ratios"]),
    )


def save_model(path: str | Path, state: DetectorState) -> None:
    """Single-model checkpoint (no optimizer state)."""
    save_checkpoint(path, state_tensors("model_a", state),
                    {"arch": arch_to_dict(state.arch), "models": {"model_a": state.init_seed}})


def load_model(path: str | Path, name: str = "model_a") -> DetectorState:
    tensors, header = load_checkpoint(path)
    arch = arch_from_dict(header["arch"])
    n = len(param_shapes(arch))
    try:
        params = [tensors[f"{name}.param{i}"] for i in range(n)]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from exc
    return DetectorState(arch, params, int(header["models"][name]))
