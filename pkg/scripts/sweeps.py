"""Desk-scale hyperparameter sweeps through the CLI: confidence threshold,
unsupervised loss weight and unlabeled pool size.

usage: python scripts/sweeps.py [--data data/desk] [--out results/sweeps] [--steps 4000] [--which tau,lambda_u,unlabeled-mult]
"""
import argparse
from pathlib import Path

from ssod.cli import main as cli
from ssod.experiments import DATA

GRIDS = {
    "tau": "0.3,0.5,0.7,0.9",
    "lambda_u": "0.25,0.5,1,2,4",
    "unlabeled-mult": "1,2,4,8",
}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--data", default="data/desk")
    p.add_argument("--out", default="results/sweeps")
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--which", default=",".join(GRIDS))
    args = p.parse_args()
    if not (Path(args.data) / "annotations.json").exists():
        cli(["gen-data", "--out", args.data, "--count", str(DATA["count"]), "--labeled-frac",
             str(DATA["labeled_fraction"]), "--heldout", str(DATA["heldout"]), "--seed", str(DATA["seed"]),
             "--distractors", str(DATA["distractors"])])
    common = ["--set", f"total_steps={args.steps}", "--set", f"eval_every={args.steps // 4}"]
    for param in args.which.split(","):
        rc = cli(["sweep", "--data", args.data, "--mode", "instant", "--param", param, "--values", GRIDS[param],
                  "--out", f"{args.out}/{param}"] + common)
        if rc:
            raise SystemExit(rc)
        runs = sorted(str(d) for d in Path(args.out, param).iterdir() if d.is_dir())
        cli(["report", *runs, "--out", f"{args.out}/{param}/plots"])


if __name__ == "__main__":
    main()
