"""Run configuration: architecture, augmentation and training hyperparameters.

All three dataclasses share one flat key namespace, which is what the
``key = value`` config file and ``--set key=value`` overrides address.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class Mode(str, Enum):
    SUPERVISED = "supervised"
    INSTANT = "instant"
    INSTANT_STAR = "instant-star"


@dataclass(frozen=True)
class ArchConfig:
    num_classes: int = 3
    # backbone conv widths and strides; total stride must equal `stride`
    channels: tuple[int, ...] = (16, 24, 32, 48, 48)
    strides: tuple[int, ...] = (1, 2, 2, 2, 1)
    anchor_size: float = 20.0
    # anchor height/width ratios, one anchor per ratio per cell
    aspect_ratios: tuple[float, ...] = (0.67, 1.5)

    def __post_init__(self):
        if not 1 <= self.num_classes <= 8:
            raise ConfigError(f"num_classes must be in [1, 8], got {self.num_classes}")
        if len(self.channels) != len(self.strides) or not 4 <= len(self.channels) <= 6:
            raise ConfigError("channels/strides must have equal length between 4 and 6")
        if any(c <= 0 for c in self.channels) or any(s not in (1, 2) for s in self.strides):
            raise ConfigError("channels must be positive and strides 1 or 2")
        if self.anchor_size <= 0 or not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise ConfigError("anchor_size and aspect_ratios must be positive")

    @property
    def stride(self) -> int:
        s = 1
        for k in self.strides:
            s *= k
        return s

    @property
    def num_anchors(self) -> int:
        return len(self.aspect_ratios)


@dataclass(frozen=True)
class AugmentConfig:
    alpha_m: float = 1.0
    # additive brightness shift and multiplicative contrast factor ranges
    brightness: tuple[float, float] = (-0.2, 0.2)
    contrast: tuple[float, float] = (0.7, 1.3)
    # cutout side length as a fraction of the image side
    cutout_frac: tuple[float, float] = (0.1, 0.3)
    p_cutout: float = 1.0
    p_none: float = 0.2
    p_mixup: float = 0.4
    p_mosaic: float = 0.4

    def __post_init__(self):
        if self.alpha_m <= 0:
            raise ConfigError(f"alpha_m must be > 0, got {self.alpha_m}")
        for name in ("brightness", "contrast", "cutout_frac"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {lo} > {hi}")
        if self.contrast[0] < 0 or not 0 <= self.cutout_frac[0] <= self.cutout_frac[1] <= 1:
            raise ConfigError("contrast must be >= 0 and cutout_frac within [0, 1]")
        probs = (self.p_cutout, self.p_none, self.p_mixup, self.p_mosaic)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigError("augmentation probabilities must lie in [0, 1]")
        if abs(self.p_none + self.p_mixup + self.p_mosaic - 1.0) > 1e-9:
            raise ConfigError("p_none + p_mixup + p_mosaic must sum to 1")

    @property
    def max_cutout_area_frac(self) -> float:
        return self.cutout_frac[1] ** 2


def _paper_decay_points(total_steps: int) -> tuple[int, int]:
    # 120k and 165k of 180k, scaled to the run length
    return round(total_steps * 120 / 180), round(total_steps * 165 / 180)


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.INSTANT
    lambda_reg: float = 1.0
    lambda_u: float = 1.0
    tau: float = 0.9
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_steps: int = 18000
    decay_points: tuple[int, int] | None = None
    batch_size: int = 16
    seed: int = 0
    # init / augmentation seed of the second co-rectify model; None -> seed + 1
    seed_b: int | None = None
    nms_iou: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    neg_ratio: int = 3
    candidate_floor: float = 0.05
    # ablation switch: pseudo-label colour/cutout views instead of weak views
    pseudo_on_strong: bool = False
    # unlabeled pool size as a multiple of the labeled pool; 0 keeps all
    unlabeled_mult: float = 0.0
    refine_mode: str = "cell"
    checkpoint_every: int = 1000
    # 0 disables; otherwise evaluate / dump pseudo labels every N steps
    eval_every: int = 0
    eval_samples: int = 200
    pseudo_dump_every: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.decay_points is None:
            object.__setattr__(self, "decay_points", _paper_decay_points(self.total_steps))
        if self.seed_b is None:
            object.__setattr__(self, "seed_b", self.seed + 1)
        object.__setattr__(self, "decay_points", tuple(int(d) for d in self.decay_points))
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        d = self.decay_points
        if len(d) != 2 or not 0 < d[0] < d[1] < self.total_steps:
            raise ConfigError(f"decay_points must be increasing and < total_steps, got {d}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2 (1:1 labeled/unlabeled)")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if min(self.lambda_reg, self.lambda_u, self.lr0, self.momentum, self.weight_decay) < 0:
            raise ConfigError("lambda_reg, lambda_u, lr0, momentum, weight_decay must be >= 0")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ConfigError("need 0 <= neg_iou <= pos_iou <= 1")
        if not 0.0 < self.nms_iou < 1.0 or not 0.0 < self.candidate_floor < 1.0:
            raise ConfigError("nms_iou and candidate_floor must be in (0, 1)")
        if self.refine_mode not in ("proposal", "cell", "match"):
            raise ConfigError("refine_mode must be 'proposal', 'cell' or 'match'")
        if min(self.eval_every, self.eval_samples, self.pseudo_dump_every) < 0:
            raise ConfigError("eval_every, eval_samples, pseudo_dump_every must be >= 0")
        if self.unlabeled_mult < 0 or self.checkpoint_every <= 0 or self.neg_ratio <= 0:
            raise ConfigError("unlabeled_mult >= 0, checkpoint_every > 0, neg_ratio > 0 required")

    @property
    def half_batch(self) -> int:
        return self.batch_size // 2

    # flat key namespace -------------------------------------------------

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ("arch", "augment"):
                out.update(dataclasses.asdict(v))
            elif isinstance(v, Mode):
                out[f.name] = v.value
            else:
                out[f.name] = v
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def valid_keys(cls) -> list[str]:
        return sorted(_FIELD_TYPES)

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "TrainConfig":
        unknown = sorted(set(values) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(
                f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(cls.valid_keys())}"
            )
        groups: dict[str, dict[str, Any]] = {"train": {}, "arch": {}, "augment": {}}
        for key, raw in values.items():
            owner, typ = _FIELD_TYPES[key]
            groups[owner][key] = _coerce(key, raw, typ)
        try:
            return cls(
                arch=ArchConfig(**groups["arch"]),
                augment=AugmentConfig(**groups["augment"]),
                **groups["train"],
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def replace(self, **overrides) -> "TrainConfig":
        flat = self.to_flat()
        flat.update(overrides)
        if "total_steps" in overrides and "decay_points" not in overrides:
            flat["decay_points"] = None
        if "seed" in overrides and "seed_b" not in overrides and self.seed_b == self.seed + 1:
            flat["seed_b"] = None
        return TrainConfig.from_flat(flat)


def _field_types() -> dict[str, tuple[str, Any]]:
    types: dict[str, tuple[str, Any]] = {}
    for owner, klass in (("arch", ArchConfig), ("augment", AugmentConfig)):
        for f in dataclasses.fields(klass):
            types[f.name] = (owner, f.type)
    for f in dataclasses.fields(TrainConfig):
        if f.name not in ("arch", "augment"):
            types[f.name] = ("train", f.type)
    return types


_FIELD_TYPES = _field_types()


def _coerce(key: str, raw: Any, typ: str) -> Any:
    if raw is None:
        return None
    typ = str(typ)
    try:
        if typ.startswith("tuple"):
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            conv = int if "int" in typ and "float" not in typ else float
            return tuple(conv(str(x).strip()) for x in items if str(x).strip())
        if typ == "bool":
            if isinstance(raw, str):
                if raw.strip().lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.strip().lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if typ.startswith("int"):
            f = float(raw)
            if f != int(f):
                raise ValueError(raw)
            return int(f)
        if typ == "float":
            return float(raw)
        if typ == "Mode":
            return Mode(str(raw).strip().lower().replace("_", "-"))
        return str(raw).strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat ``key = value`` format; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """Defaults < config file < overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(overrides or {})
    return TrainConfig.from_flat(values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, v in cfg.to_flat().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
