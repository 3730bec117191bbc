"""Train every acceptance variant for every seed (cached) and print a comparison table.

usage: python scripts/run_acceptance.py [--root results/acceptance] [--variants a,b] [--seeds 0,1,2]
                                        [--steps 4000] [--distractors 3]
"""
import argparse
import logging

import numpy as np

from ssod.experiments import DATA, DESK_STEPS, SEEDS, VARIANTS, run_all


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--root", default="results/acceptance")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    p.add_argument("--steps", type=int, default=DESK_STEPS)
    p.add_argument("--distractors", type=int, default=DATA["distractors"])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    data = dict(DATA, distractors=args.distractors)
    results = run_all(args.root, args.variants.split(","), seeds, args.steps, data)
    print(f"{'variant':24s} " + " ".join(f"s{s}:AP50" for s in seeds) + "   mean")
    for name, runs in results.items():
        ap = [r.final["ap50"] for r in runs]
        print(f"{name:24s} " + " ".join(f"{100 * a:8.2f}" for a in ap) + f" {100 * np.mean(ap):7.2f}")


if __name__ == "__main__":
    main()
