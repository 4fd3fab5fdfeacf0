"""Augmentation ablation on an imbalanced case mix.

One failure type is injected in 5% of cases and the others share the rest.
For each simulator seed the pipeline is trained with and without
nearest-neighbour augmentation and the weighted F1 on the held-out cases is
compared.

    python3 scripts/ablation.py --seeds 42 1 2 --rare memory_free
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from diagfusion.pipeline import RunConfig, run_experiment
from diagfusion.simulator import SimConfig, imbalanced, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[42, 1, 2])
    ap.add_argument("--rare", default="memory_free")
    ap.add_argument("--share", type=float, default=0.05)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    scores = {True: [], False: []}
    for seed in args.seeds:
        data = Path(args.out) / f"sim-{seed}"
        simulate(imbalanced(SimConfig(seed=seed), args.rare, args.share), data)
        for aug in (True, False):
            exp = run_experiment(RunConfig(augment=aug).with_data_dir(data), data / "cache")
            wrong = [(r["true_type"], r["pred_type"]) for r in exp.rows if r["true_type"] != r["pred_type"]]
            scores[aug].append(exp.report.f1)
            print(f"seed {seed:>3} augment={aug!s:<5} A@3={exp.report.a_at_k[3]:.3f} F1={exp.report.f1:.4f} "
                  f"errors={wrong}", flush=True)
    print(f"mean F1: augmented {np.mean(scores[True]):.4f}, no augmentation {np.mean(scores[False]):.4f}")


if __name__ == "__main__":
    main()
