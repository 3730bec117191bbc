"""Training loop for the supervised baseline, single-model and two-model
semi-supervised modes.

Every random draw at step ``t`` comes from a generator seeded by
``(seed, t, stream)``, so a run resumed from a checkpoint replays exactly the
draws the uninterrupted run would have made.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import detector as det
from .augment import color_cutout, strong_augment, weak_augment
from .config import ConfigError, Mode, TrainConfig, format_config
from .detector import DetectorState
from .evaluation import evaluate, pseudo_quality
from .losses import LossBreakdown, TrainBatch, Targets, TrainingError, gradients, image_targets
from .synthdata import Dataset, ImageSample
from .teaching import corectify_pseudo_label_batch, pseudo_label_batch

log = logging.getLogger(__name__)

# random stream ids
_LABELED_BATCH, _UNLABELED_BATCH = 0, 1
_WEAK_L, _WEAK_U, _STRONG, _NEG_L, _NEG_U, _PSEUDO_VIEW = 10, 11, 12, 13, 14, 15


def _rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def lr_at(step: int, config: TrainConfig) -> float:
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    d1, d2 = config.decay_points
    if step < d1:
        return config.lr0
    if step < d2:
        return config.lr0 / 10
    return config.lr0 / 100


@dataclass
class ModelSlot:
    state: DetectorState
    momentum: list[torch.Tensor]
    seed: int

    @classmethod
    def fresh(cls, config: TrainConfig, seed: int) -> "ModelSlot":
        state = det.init(config.arch, seed)
        return cls(state, [torch.zeros_like(p) for p in state.params], seed)


@dataclass
class ModelPair:
    a: ModelSlot
    b: ModelSlot | None = None

    @classmethod
    def fresh(cls, config: TrainConfig) -> "ModelPair":
        b = ModelSlot.fresh(config, config.seed_b) if config.mode == Mode.INSTANT_STAR else None
        return cls(ModelSlot.fresh(config, config.seed), b)

    def slots(self) -> list[ModelSlot]:
        return [self.a] if self.b is None else [self.a, self.b]


@dataclass
class PseudoStatsRecord:
    iteration: int
    n1: float
    n2: float
    pseudo_count: int


def sgd_update(slot: ModelSlot, grads: list[torch.Tensor], lr: float, momentum: float, weight_decay: float):
    """v <- mu * v + g + wd * theta ; theta <- theta - lr * v (in place)."""
    with torch.no_grad():
        for p, v, g in zip(slot.state.params, slot.momentum, grads):
            v.mul_(momentum).add_(g).add_(p, alpha=weight_decay)
            p.sub_(v, alpha=lr)


@dataclass
class BatchIds:
    labeled: list[str]
    unlabeled: list[str]


def sample_batch(labeled_pool: list[str], unlabeled_pool: list[str], config: TrainConfig, step: int) -> BatchIds:
    """Half batch from each pool, uniformly with replacement."""
    h = config.half_batch
    lab = _rng(config.seed, step, _LABELED_BATCH).integers(0, len(labeled_pool), size=h)
    unl = []
    if config.mode != Mode.SUPERVISED:
        unl = [unlabeled_pool[i] for i in _rng(config.seed, step, _UNLABELED_BATCH).integers(0, len(unlabeled_pool), size=h)]
    return BatchIds([labeled_pool[i] for i in lab], unl)


def _targets(samples: list[ImageSample], config: TrainConfig, rng: np.random.Generator) -> Targets:
    h, w = samples[0].height, samples[0].width
    anchors = det.make_anchors(config.arch, h, w)
    return Targets.stack([
        image_targets(anchors, s.annotations, config.pos_iou, config.neg_iou, config.neg_ratio, rng) for s in samples
    ])


@dataclass
class _Prepared:
    labeled: list[ImageSample]
    unlabeled_weak: list[ImageSample] = field(default_factory=list)
    label_views: list[ImageSample] = field(default_factory=list)


def train_step(pair: ModelPair, batch: BatchIds, dataset: Dataset, config: TrainConfig, step: int):
    """One iteration. Returns ``(breakdowns per model, PseudoStatsRecord, pseudo sets of model a)``.

    Pseudo labels come from the parameters as they were when the step began;
    all models are updated only after every gradient is computed.
    """
    slots = pair.slots()
    prepared = []
    for slot in slots:
        rng = _rng(slot.seed, step, _WEAK_L)
        p = _Prepared([weak_augment(dataset.labeled(i), rng)[0] for i in batch.labeled])
        if config.mode != Mode.SUPERVISED:
            rng = _rng(slot.seed, step, _WEAK_U)
            p.unlabeled_weak = [weak_augment(dataset.unlabeled(i), rng)[0] for i in batch.unlabeled]
            p.label_views = p.unlabeled_weak
            if config.pseudo_on_strong:
                rng = _rng(slot.seed, step, _PSEUDO_VIEW)
                p.label_views = [color_cutout(s, config.augment, rng) for s in p.unlabeled_weak]
        prepared.append(p)

    pseudo_sets = [[] for _ in slots]
    if config.mode == Mode.INSTANT:
        pseudo_sets[0] = pseudo_label_batch(pair.a.state, prepared[0].label_views, config.tau, config.nms_iou)
    elif config.mode == Mode.INSTANT_STAR:
        for k, (me, other) in enumerate([(pair.a, pair.b), (pair.b, pair.a)]):
            pseudo_sets[k] = corectify_pseudo_label_batch(
                me.state, other.state, prepared[k].label_views, config.tau, config.nms_iou,
                config.candidate_floor, config.refine_mode)

    all_grads, breakdowns = [], []
    for k, (slot, p) in enumerate(zip(slots, prepared)):
        tb = TrainBatch(np.stack([s.pixels for s in p.labeled]),
                        _targets(p.labeled, config, _rng(slot.seed, step, _NEG_L)))
        if config.mode != Mode.SUPERVISED:
            rng = _rng(slot.seed, step, _STRONG)
            strong = []
            for weak, ps in zip(p.unlabeled_weak, pseudo_sets[k]):
                with_pseudo = weak.with_annotations(ps.to_annotations(config.arch.num_classes))
                partner = p.labeled[int(rng.integers(0, len(p.labeled)))]
                strong.append(strong_augment(with_pseudo, partner, config.augment, rng)[0])
            tb.unlabeled_pixels = np.stack([s.pixels for s in strong])
            tb.unlabeled_targets = _targets(strong, config, _rng(slot.seed, step, _NEG_U))
        grads, bd = gradients(slot.state, tb, config.lambda_reg, config.lambda_u, config.tau)
        all_grads.append(grads)
        breakdowns.append(bd)

    lr = lr_at(step, config)
    for slot, grads in zip(slots, all_grads):
        sgd_update(slot, grads, lr, config.momentum, config.weight_decay)

    n1 = float(np.mean([len(s.annotations) for s in prepared[0].labeled]))
    counts = [len(ps) for ps in pseudo_sets[0]]
    n_pseudo = float(np.mean(counts)) if counts else 0.0
    stats = PseudoStatsRecord(step, n1, n1 + n_pseudo, int(sum(counts)))
    return breakdowns, stats, pseudo_sets[0]


# --- full runs ----------------------------------------------------------------------


def _pools(dataset: Dataset, config: TrainConfig) -> tuple[list[str], list[str]]:
    if dataset.num_classes != config.arch.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, config num_classes={config.arch.num_classes}")
    labeled = dataset.labeled_ids()
    unlabeled = dataset.unlabeled_ids()
    if not labeled:
        raise ConfigError("split has no labeled images")
    if config.mode != Mode.SUPERVISED and not unlabeled:
        raise ConfigError(f"mode {config.mode.value} needs unlabeled images")
    if config.unlabeled_mult > 0:
        n = max(1, round(config.unlabeled_mult * len(labeled)))
        if n > len(unlabeled):
            raise ConfigError(f"unlabeled_mult={config.unlabeled_mult} needs {n} unlabeled images, have {len(unlabeled)}")
        perm = np.random.default_rng([config.seed, 0xD1]).permutation(len(unlabeled))
        unlabeled = [unlabeled[i] for i in sorted(perm[:n])]
    return labeled, unlabeled


def save_training_checkpoint(path: Path, pair: ModelPair, config: TrainConfig, step: int) -> None:
    tensors = {}
    models = {}
    for name, slot in (("model_a", pair.a), ("model_b", pair.b)):
        if slot is None:
            continue
        tensors.update(det.state_tensors(name, slot.state))
        tensors.update({f"{name}.momentum{i}": m for i, m in enumerate(slot.momentum)})
        models[name] = slot.seed
    header = {"arch": det.arch_to_dict(config.arch), "models": models, "step": step, "config": config.to_flat()}
    det.save_checkpoint(path, tensors, header)


def load_training_checkpoint(path: Path) -> tuple[ModelPair, dict]:
    tensors, header = det.load_checkpoint(path)
    arch = det.arch_from_dict(header["arch"])
    n = len(det.param_shapes(arch))
    slots = {}
    for name, seed in header["models"].items():
        params = [tensors[f"{name}.param{i}"] for i in range(n)]
        momentum = [tensors[f"{name}.momentum{i}"] for i in range(n)]
        slots[name] = ModelSlot(DetectorState(arch, params, seed), momentum, seed)
    return ModelPair(slots["model_a"], slots.get("model_b")), header


@dataclass
class TrainResult:
    pair: ModelPair
    metrics: list[dict]
    run_dir: Path | None = None


def _metrics_line(step: int, lr: float, bd: LossBreakdown, stats: PseudoStatsRecord, wall_ms: float,
                  bd_b: LossBreakdown | None) -> dict:
    line = {
        "step": step, "lr": lr,
        "loss_total": bd.total, "loss_sup": bd.sup, "loss_unsup": bd.unsup,
        "sup_cls": bd.sup_cls, "sup_reg": bd.sup_reg, "unsup_cls": bd.unsup_cls, "unsup_reg": bd.unsup_reg,
        "n1": stats.n1, "n2": stats.n2, "pseudo_count": stats.pseudo_count, "wall_ms": round(wall_ms, 3),
    }
    if bd_b is not None:
        line["b_loss_total"] = bd_b.total
        line["b_loss_unsup"] = bd_b.unsup
    return line


def _eval_record(step: int, pair: ModelPair, dataset: Dataset, config: TrainConfig,
                 heldout: list[ImageSample], quality: list[ImageSample]) -> dict:
    rec: dict = {"step": step}
    if heldout:
        r = evaluate(pair.a.state, heldout, nms_iou=config.nms_iou)
        rec.update(ap50=r.ap50, ap75=r.ap75, map=r.map_5095)
    if quality:
        q = pseudo_quality(pair.a.state, quality, config.tau, config.nms_iou)
        rec.update(pseudo_single_ap50=q.ap50, pseudo_single_map=q.map_5095)
        if pair.b is not None:
            q = pseudo_quality((pair.a.state, pair.b.state), quality, config.tau, config.nms_iou,
                               config.candidate_floor, config.refine_mode)
            rec.update(pseudo_corectify_ap50=q.ap50, pseudo_corectify_map=q.map_5095)
    return rec


def latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*.ckpt"))
    return ckpts[-1] if ckpts else None


def train(dataset: Dataset, config: TrainConfig, run_dir: str | Path | None = None,
          resume_from: str | Path | None = None, stop_at: int | None = None) -> TrainResult:
    """Run ``config.total_steps`` iterations (or up to ``stop_at``).

    With ``run_dir``, writes ``config.txt``, ``metrics.jsonl``, ``eval.jsonl``
    and ``checkpoints/step_XXXXXX.ckpt`` every ``checkpoint_every`` steps and
    at the end. ``resume_from`` continues from a checkpoint written by the
    same config.
    """
    labeled, unlabeled = _pools(dataset, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    start = 0
    if resume_from is not None:
        pair, header = load_training_checkpoint(Path(resume_from))
        if header["config"] != config.to_flat():
            raise ConfigError(f"{resume_from} was written by a different config")
        start = int(header["step"])
    else:
        pair = ModelPair.fresh(config)
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)

    metrics: list[dict] = []
    metrics_f = eval_f = dump_f = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(format_config(config))
        mpath = run_dir / "metrics.jsonl"
        kept = []
        if start and mpath.exists():
            kept = [ln for ln in mpath.read_text().splitlines() if ln.strip() and json.loads(ln)["step"] < start]
        mpath.write_text("".join(ln + "\n" for ln in kept))
        metrics_f = open(mpath, "a")
        eval_f = open(run_dir / "eval.jsonl", "a" if start else "w") if config.eval_every else None
        dump_f = open(run_dir / "pseudo_labels.jsonl", "a" if start else "w") if config.pseudo_dump_every else None

    heldout = [dataset.oracle_sample(i) for i in dataset.heldout_ids()[:config.eval_samples]]
    quality = [dataset.oracle_sample(i) for i in unlabeled[:config.eval_samples]] if config.mode != Mode.SUPERVISED else []

    try:
        for step in range(start, end):
            t0 = time.perf_counter()
            batch = sample_batch(labeled, unlabeled, config, step)
            try:
                bds, stats, psets = train_step(pair, batch, dataset, config, step)
            except TrainingError as exc:
                # raised before any update, so the pair still holds the last good state
                if run_dir is not None:
                    save_training_checkpoint(run_dir / "checkpoints" / "abort.ckpt", pair, config, step)
                raise TrainingError(f"step {step}: {exc}") from exc
            wall = (time.perf_counter() - t0) * 1000
            line = _metrics_line(step, lr_at(step, config), bds[0], stats, wall, bds[1] if len(bds) > 1 else None)
            metrics.append(line)
            if metrics_f:
                metrics_f.write(json.dumps(line) + "\n")
                metrics_f.flush()
            if dump_f and step % config.pseudo_dump_every == 0:
                for ps in psets:
                    dump_f.write(json.dumps({"step": step, **ps.to_json()}) + "\n")
            done = step + 1
            if config.eval_every and (done % config.eval_every == 0 or done == config.total_steps):
                rec = _eval_record(done, pair, dataset, config, heldout, quality)
                log.info("eval %s", rec)
                if eval_f:
                    eval_f.write(json.dumps(rec) + "\n")
                    eval_f.flush()
            if run_dir is not None and (done % config.checkpoint_every == 0 or done == end):
                save_training_checkpoint(run_dir / "checkpoints" / f"step_{done:06d}.ckpt", pair, config, done)
            if step % 100 == 0:
                log.info("step %d loss %.4f (sup %.4f unsup %.4f) n2-n1 %.2f", step, line["loss_total"],
                         line["loss_sup"], line["loss_unsup"], stats.n2 - stats.n1)
    finally:
        for f in (metrics_f, eval_f, dump_f):
            if f:
                f.close()
    return TrainResult(pair, metrics, run_dir)
