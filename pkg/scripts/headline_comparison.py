#!/usr/bin/env python3
"""Compare the three controller strategies at the headline operating point.

Runs full-state LQR, static output feedback, and the Luenberger observer
controller through the identical protocol (same seed, same burn-in horizon)
at Re = 11.29 on a 128-node grid, then prints a side-by-side table and
writes plot-ready trajectories under the output directory.

Full fidelity takes roughly ten minutes on a laptop; --quick drops to a
64-node grid and shorter horizons for a couple-of-minutes sanity pass.
"""

import argparse
import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from filmctl.cli import write_summary, write_trajectory
from filmctl.core import PhysicalParams
from filmctl.sim import PerturbationSpec, RunConfig, run

STRATEGIES = ("full_state", "output_feedback", "luenberger")


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--re", type=float, default=11.29)
    ap.add_argument("--n-nodes", type=int, default=128)
    ap.add_argument("--burn-in", type=float, default=300.0)
    ap.add_argument("--control-time", type=float, default=100.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", type=Path, default=Path("out/headline"))
    ap.add_argument("--quick", action="store_true", help="64 nodes, burn 50, control 60")
    return ap.parse_args()


def main() -> int:
    args = parse_args()
    if args.quick:
        args.n_nodes, args.burn_in, args.control_time = 64, 50.0, 60.0
    params = PhysicalParams(reynolds=args.re, capillary=0.05)

    results = {}
    for strategy in STRATEGIES:
        config = RunConfig.build(
            params,
            n_nodes=args.n_nodes,
            strategy=strategy,
            burn_in_time=args.burn_in,
            control_time=args.control_time,
        )
        config = dataclasses.replace(config, perturbation=PerturbationSpec(seed=args.seed))
        out = args.out_dir / strategy
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        record = run(config)
        elapsed = time.perf_counter() - t0
        write_trajectory(out / "trajectory.dat", record)
        write_summary(out / "summary.json", record, wall_seconds=elapsed)
        results[strategy] = (record, elapsed)
        print(f"{strategy}: {record.verdict} in {elapsed:.0f} s")

    print()
    print(f"{'strategy':>16} {'verdict':>16} {'final |h-1|':>12} {'cost':>10} {'decay':>8} {'R^2':>6}")
    for strategy, (rec, _) in results.items():
        cost = rec.cost[-1] if rec.cost.size else float("nan")
        print(
            f"{strategy:>16} {rec.verdict:>16} {rec.final_norm:>12.3e} "
            f"{cost:>10.4f} {rec.decay_rate:>8.4f} {rec.decay_r2:>6.3f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
