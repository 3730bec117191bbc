"""Desk-scale comparison runs with on-disk caching.

Each (variant, seed) run trains once into ``<root>/<variant>-s<seed>/`` and
writes ``summary.json``; later calls read the summary instead of retraining.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Mode, TrainConfig
from .evaluation import pseudo_quality
from .synthdata import Dataset, make_dataset
from .trainer import train

log = logging.getLogger(__name__)

DATA = {"seed": 7, "count": 2000, "labeled_fraction": 0.1, "heldout": 300, "distractors": 3}
DESK_STEPS = 4000
SEEDS = (0, 1, 2)

VARIANTS: dict[str, dict] = {
    "supervised": {"mode": Mode.SUPERVISED},
    "instant": {"mode": Mode.INSTANT},
    "instant-star": {"mode": Mode.INSTANT_STAR},
    "instant-tau0.3": {"mode": Mode.INSTANT, "tau": 0.3},
    "instant-strong-pseudo": {"mode": Mode.INSTANT, "pseudo_on_strong": True},
}


def desk_config(variant: str, seed: int, total_steps: int = DESK_STEPS) -> TrainConfig:
    overrides = dict(VARIANTS[variant])
    return TrainConfig(total_steps=total_steps, seed=seed, eval_every=total_steps // 4,
                       checkpoint_every=total_steps // 4, **overrides)


_DATASETS: dict[tuple, Dataset] = {}


def desk_dataset(data: dict | None = None) -> Dataset:
    data = DATA if data is None else data
    key = tuple(sorted(data.items()))
    if key not in _DATASETS:
        _DATASETS[key] = make_dataset(**data)
    return _DATASETS[key]


def window_means(metrics: list[dict], frac: float = 0.1) -> tuple[float, float]:
    """Mean n2 - n1 over the first and the last ``frac`` of iterations."""
    gap = np.array([m["n2"] - m["n1"] for m in metrics], dtype=np.float64)
    k = max(1, int(round(frac * len(gap))))
    return float(gap[:k].mean()), float(gap[-k:].mean())


def params_digest(pair) -> str:
    h = hashlib.sha256()
    for slot in pair.slots():
        for p in slot.state.params:
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


@dataclass
class RunSummary:
    variant: str
    seed: int
    total_steps: int
    final: dict
    gap_first: float
    gap_last: float
    wall_s: float
    params_sha256: str
    config: dict | None = None
    data: dict | None = None

    @classmethod
    def load(cls, path: Path) -> "RunSummary":
        return cls(**json.loads(Path(path).read_text()))


def run_variant(variant: str, seed: int, root: str | Path, total_steps: int = DESK_STEPS,
                data: dict | None = None) -> RunSummary:
    data = dict(DATA if data is None else data)
    root = Path(root)
    run_dir = root / f"{variant}-s{seed}"
    path = run_dir / "summary.json"
    config = desk_config(variant, seed, total_steps)
    if path.exists():
        s = RunSummary.load(path)
        if s.total_steps == total_steps and s.config == config.to_flat() and s.data == data:
            return s
    dataset = desk_dataset(data)
    t0 = time.perf_counter()
    result = train(dataset, config, run_dir)
    wall = time.perf_counter() - t0
    final = json.loads((run_dir / "eval.jsonl").read_text().splitlines()[-1])
    if result.pair.b is not None:
        # the other refinement read-outs, scored on the same final pair for the record
        quality = [dataset.oracle_sample(i) for i in dataset.unlabeled_ids()[:config.eval_samples]]
        for mode in ("proposal", "cell", "match"):
            q = pseudo_quality((result.pair.a.state, result.pair.b.state), quality, config.tau, config.nms_iou,
                               config.candidate_floor, mode)
            final[f"pseudo_corectify_{mode}_map"] = q.map_5095
    first, last = window_means(result.metrics)
    summary = RunSummary(variant, seed, total_steps, final, first, last, wall, params_digest(result.pair),
                         config.to_flat(), data)
    path.write_text(json.dumps(summary.__dict__, indent=2) + "\n")
    log.info("%s seed %d: %s (%.0f s)", variant, seed, final, wall)
    return summary


def run_all(root: str | Path, variants=tuple(VARIANTS), seeds=SEEDS, total_steps: int = DESK_STEPS,
            data: dict | None = None) -> dict[str, list[RunSummary]]:
    out: dict[str, list[RunSummary]] = {v: [] for v in variants}
    for s in seeds:
        for v in variants:
            out[v].append(run_variant(v, s, root, total_steps, data))
    return out
