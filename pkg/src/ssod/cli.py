"""Command line entry point: gen-data, train, eval, sweep, report.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
Relative ``--data`` paths resolve against ``$SSOD_DATA_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ConfigError, Mode, TrainConfig, load_config
from .detector import CheckpointError, load_model
from .evaluation import evaluate
from .synthdata import DatasetParseError, load_dataset, make_dataset, save_dataset
from .trainer import latest_checkpoint, train

log = logging.getLogger("ssod")

DATA_ROOT_ENV = "SSOD_DATA_ROOT"
SWEEP_KEYS = {"tau": "tau", "lambda_u": "lambda_u", "unlabeled-mult": "unlabeled_mult"}


class UsageError(Exception):
    pass


class ReportError(Exception):
    pass


# --- hashing and manifests --------------------------------------------------


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_hash(root: str | Path) -> str:
    """Hash over annotations.json and every image, in sorted path order."""
    root = Path(root)
    h = hashlib.sha256()
    files = [root / "annotations.json"] + sorted((root / "images").glob("*.png"))
    for p in files:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(bytes.fromhex(file_hash(p)))
    return h.hexdigest()


@dataclass
class RunManifest:
    run_id: str
    config: dict
    dataset_hash: str
    dataset_path: str
    artifacts: dict[str, str] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def run_id_for(config: TrainConfig, data_hash: str) -> str:
    digest = hashlib.sha256((json.dumps(config.to_flat(), sort_keys=True) + data_hash).encode()).hexdigest()
    return f"{config.mode.value}-s{config.seed}-{digest[:10]}"


def artifact_hashes(run_dir: Path) -> dict[str, str]:
    out = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", ".lock"):
            out[p.relative_to(run_dir).as_posix()] = file_hash(p)
    return out


class RunLock:
    """Exclusive ownership of a run directory for one process."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f"{self.path.parent} is locked by another process (remove {self.path} if stale)")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


# --- helpers -----------------------------------------------------------------


def resolve_data(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root and not p.exists():
        p = Path(root) / p
    if not (p / "annotations.json").exists():
        raise UsageError(f"--data {path}: no dataset at {p}")
    return p


def parse_sets(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> TrainConfig:
    overrides = parse_sets(args.set)
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.config is not None and not Path(args.config).exists():
        raise UsageError(f"--config {args.config}: file not found")
    return load_config(args.config, overrides)


def run_training(data_dir: Path, config: TrainConfig, run_dir: Path, resume: bool = False) -> RunManifest:
    dataset = load_dataset(data_dir)
    dhash = dataset_hash(data_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(run_dir):
        resume_from = None
        if resume:
            resume_from = latest_checkpoint(run_dir)
        train(dataset, config, run_dir, resume_from=resume_from)
        write_plots(load_run_logs([run_dir]), run_dir / "plots")
        manifest = RunManifest(run_id_for(config, dhash), config.to_flat(), dhash, str(data_dir),
                               artifact_hashes(run_dir))
        manifest.save(run_dir / "manifest.json")
    return manifest


# --- report ------------------------------------------------------------------


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            if not isinstance(row, dict) or "step" not in row:
                raise ValueError("record without a step field")
        except ValueError as exc:
            raise ReportError(f"{path}:{lineno}: malformed log line ({exc})") from exc
        rows.append(row)
    return rows


def load_run_logs(run_dirs: list[Path]) -> dict[str, dict[str, list[dict]]]:
    logs = {}
    for d in run_dirs:
        d = Path(d)
        if not (d / "metrics.jsonl").exists():
            raise UsageError(f"{d}: no metrics.jsonl")
        ev = d / "eval.jsonl"
        logs[d.name] = {"metrics": read_jsonl(d / "metrics.jsonl"), "eval": read_jsonl(ev) if ev.exists() else []}
    return logs


PLOTS = {
    "annotations": ("metrics", ["n1", "n2"], "boxes per unlabeled image"),
    "losses": ("metrics", ["loss_sup", "loss_unsup", "sup_cls", "sup_reg", "unsup_cls", "unsup_reg"], "loss"),
    "pseudo_map": ("eval", ["pseudo_single_map", "pseudo_corectify_map"], "pseudo label mAP"),
}


def write_plots(logs: dict[str, dict[str, list[dict]]], out_dir: Path) -> list[Path]:
    """One PNG per figure plus a tab-separated sidecar holding the plotted points."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (source, keys, ylabel) in PLOTS.items():
        fig, ax = plt.subplots(figsize=(7, 4))
        rows = ["run\tseries\tstep\tvalue"]
        for run, data in logs.items():
            for key in keys:
                pts = [(r["step"], r[key]) for r in data[source] if r.get(key) is not None]
                if not pts:
                    continue
                xs, ys = zip(*pts)
                ax.plot(xs, ys, lw=0.8, label=f"{run}:{key}" if len(logs) > 1 else key)
                rows.extend(f"{run}\t{key}\t{x}\t{y!r}" for x, y in pts)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if ax.lines:
            ax.legend(fontsize=7)
        fig.tight_layout()
        png = out_dir / f"{name}.png"
        fig.savefig(png, dpi=100)
        plt.close(fig)
        (out_dir / f"{name}.tsv").write_text("\n".join(rows) + "\n")
        written.append(png)
    return written


def read_sidecar(path: Path) -> list[tuple[str, str, int, float]]:
    lines = Path(path).read_text().splitlines()[1:]
    out = []
    for ln in lines:
        run, series, step, value = ln.split("\t")
        out.append((run, series, int(step), float(value)))
    return out


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if not 0.0 < args.labeled_frac <= 1.0:
        raise UsageError(f"--labeled-frac must be in (0, 1], got {args.labeled_frac}")
    if args.count < 1 or args.classes < 1 or args.max_shapes < 1 or args.heldout < 0 or args.distractors < 0:
        raise UsageError("--count, --classes and --max-shapes must be positive, --heldout and --distractors non-negative")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"--out {out} exists and is not empty; pass --force to overwrite")
    ds = make_dataset(args.seed, args.count, args.labeled_frac, heldout=args.heldout,
                      image_size=args.image_size, classes=args.classes, max_shapes=args.max_shapes,
                      distractors=args.distractors)
    if out.exists() and args.force:
        for p in (out / "images").glob("*.png"):
            p.unlink()
    save_dataset(ds, out)
    summary = {"labeled": len(ds.labeled_ids()), "unlabeled": len(ds.unlabeled_ids()),
               "heldout": len(ds.heldout_ids()), "dataset_hash": dataset_hash(out)}
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    data = resolve_data(args.data)
    config = build_config(args)
    run_dir = Path(args.out) if args.out else Path("runs") / run_id_for(config, dataset_hash(data))
    manifest = run_training(data, config, run_dir, resume=args.resume)
    print(json.dumps({"run_dir": str(run_dir), "run_id": manifest.run_id}))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"--checkpoint {ckpt}: file not found")
    ds = load_dataset(resolve_data(args.data))
    state = load_model(ckpt)
    if args.split == "labeled":
        samples = [ds.labeled(i) for i in ds.labeled_ids()]
    else:
        samples = [ds.oracle_sample(i) for i in ds.heldout_ids()]
    if not samples:
        raise UsageError(f"split {args.split} is empty")
    result = evaluate(state, samples)
    text = json.dumps(result.to_json(), indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_KEYS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_KEYS)}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    data = resolve_data(args.data)
    base = build_config(args)
    key = SWEEP_KEYS[args.param]
    configs = [base.replace(**{key: v}) for v in values]  # validate everything before training
    out = Path(args.out)
    rows = []
    for v, cfg in zip(values, configs):
        run_dir = out / f"{key}={v}"
        run_training(data, cfg, run_dir)
        ev = read_jsonl(run_dir / "eval.jsonl") if (run_dir / "eval.jsonl").exists() else []
        final = ev[-1] if ev else {}
        rows.append({key: v, "ap50": final.get("ap50"), "map": final.get("map"), "run_dir": run_dir.name})
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    fmt = lambda x: "-" if x is None else f"{100 * x:.2f}"
    table = [f"{key}\tAP50\tmAP"] + [f"{r[key]}\t{fmt(r['ap50'])}\t{fmt(r['map'])}" for r in rows]
    (out / "summary.tsv").write_text("\n".join(table) + "\n")
    print("\n".join(table))
    return 0


def cmd_report(args) -> int:
    logs = load_run_logs([Path(r) for r in args.runs])
    written = write_plots(logs, Path(args.out))
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--max-shapes", type=int, default=4)
    g.add_argument("--distractors", type=int, default=0, help="max unannotated non-target shapes per image")
    g.add_argument("--labeled-frac", type=float, default=0.1)
    g.add_argument("--heldout", type=int, default=300, help="extra test images outside both pools")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--mode", choices=[m.value for m in Mode])
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--out")

    t = sub.add_parser("train", help="train one run")
    train_flags(t)
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["labeled", "heldout"], default="heldout")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one run per value of a hyperparameter")
    train_flags(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="plots from one or more run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", default="plots")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "command", None) == "sweep" and args.out is None:
        args.out = f"sweeps/{args.param}"
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReportError, DatasetParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
