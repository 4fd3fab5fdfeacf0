"""Simulate telemetry, train on the first two thirds of the cases and
evaluate on the rest.

    python3 scripts/run_experiment.py --out runs/default
    python3 scripts/run_experiment.py --sim-config my_sim.json --seed 7 --out runs/s7
"""
import argparse
import json
import logging
import time
from pathlib import Path

from diagfusion.pipeline import RunConfig, run_experiment, write_evaluation
from diagfusion.simulator import SimConfig, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--sim-config", help="simulator JSON (default config if omitted)")
    ap.add_argument("--sim-seed", type=int, help="override the simulator seed")
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--no-augment", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    out = Path(args.out)
    sim = SimConfig.load(args.sim_config) if args.sim_config else SimConfig()
    if args.sim_seed is not None:
        sim.seed = args.sim_seed
    t0 = time.perf_counter()
    simulate(sim, out / "data")
    cfg = RunConfig(seed=args.seed, augment=not args.no_augment).with_data_dir(out / "data")
    exp = run_experiment(cfg, out / "cache")
    exp.models.save(out / "models")
    write_evaluation(out / "eval", exp.report, exp.rows)

    rep, ref = exp.report, exp.reference
    print(f"{rep.n_cases} test cases in {time.perf_counter() - t0:.0f}s")
    print("  ".join(f"A@{k}={v:.3f}" for k, v in rep.a_at_k.items()) + f"  Avg@5={rep.avg_at_5:.3f}")
    print(f"type P={rep.precision:.3f} R={rep.recall:.3f} F1={rep.f1:.3f}")
    print(f"random A@3={ref['random_a_at_3']:.3f}  majority F1={ref['majority_f1']:.3f}")
    print(json.dumps({"report": str(out / "eval" / "report.json")}))


if __name__ == "__main__":
    main()
