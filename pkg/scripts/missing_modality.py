"""Diagnose with one or more modalities withheld.

Models are trained once with every modality; each row of the output switches
off a subset at diagnosis time only.

    python3 scripts/missing_modality.py --out runs/missing
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from diagfusion.pipeline import RunConfig, evaluate_models, held_out_cases, load_inputs, train
from diagfusion.simulator import SimConfig, simulate

SUBSETS = [[], ["metric"], ["log"], ["trace"], ["log", "metric"], ["trace", "metric"], ["trace", "log"]]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/missing")
    ap.add_argument("--sim-seed", type=int, default=42)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    data = Path(args.out) / "data"
    simulate(SimConfig(seed=args.sim_seed), data)
    cfg = RunConfig().with_data_dir(data)
    models = train(cfg, Path(args.out) / "cache")
    deployment, telemetry = load_inputs(cfg)
    test_cases = held_out_cases(cfg, models, deployment)
    print(f"{'withheld':<16} A@1    A@3    Avg@5  F1")
    for off in SUBSETS:
        rep, _ = evaluate_models(replace(cfg, disabled_modalities=off), models, test_cases, deployment, telemetry)
        print(f"{'+'.join(off) or 'none':<16} {rep.a_at_k[1]:.3f}  {rep.a_at_k[3]:.3f}  "
              f"{rep.avg_at_5:.3f}  {rep.f1:.3f}")


if __name__ == "__main__":
    main()
