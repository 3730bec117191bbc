"""Overlay plots of the cached acceptance runs (one seed) plus a per-variant table.

usage: python scripts/figures.py [--root results/acceptance] [--seed 0] [--out results/figures]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ssod.cli import load_run_logs, write_plots
from ssod.experiments import VARIANTS


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--root", default="results/acceptance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/figures")
    args = p.parse_args()
    root = Path(args.root)
    dirs = [root / f"{v}-s{args.seed}" for v in VARIANTS if (root / f"{v}-s{args.seed}" / "metrics.jsonl").exists()]
    for path in write_plots(load_run_logs(dirs), Path(args.out)):
        print(path)
    rows = ["variant\tseeds\tAP50\tAP75\tmAP"]
    for v in VARIANTS:
        finals = [json.loads((d / "summary.json").read_text())["final"] for d in sorted(root.glob(f"{v}-s*"))
                  if (d / "summary.json").exists()]
        if finals:
            m = {k: 100 * np.mean([f[k] for f in finals]) for k in ("ap50", "ap75", "map")}
            rows.append(f"{v}\t{len(finals)}\t{m['ap50']:.2f}\t{m['ap75']:.2f}\t{m['map']:.2f}")
    Path(args.out, "summary.tsv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))


if __name__ == "__main__":
    main()
