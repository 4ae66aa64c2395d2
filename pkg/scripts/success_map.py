#!/usr/bin/env python3
"""Map where a restricted-observation controller stabilises the film.

Sweeps a (Reynolds, actuator count, observer count) grid for one strategy
and writes plot-ready ``R M P`` success/failure/gap tables plus a JSON
digest.  Point seeds derive from the master seed, so a rerun with the same
arguments reproduces the files byte for byte.

Example:
    python scripts/success_map.py --strategy luenberger \
        --reynolds logspace:1:100:8 --m-list 5 --p-list 3,5,7 --workers 4
"""

import argparse
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from filmctl.cli import main as cli_main

TEMPLATE = """\
[physics]
reynolds = 1.0

[grid]
n_nodes = {n_nodes}

[run]
burn_in_time = {burn_in}
control_time = {control_time}

[sweep]
reynolds = {reynolds}
m_list = {m_list}
p_list = {p_list}
strategy = {strategy}
master_seed = {seed}
workers = {workers}
"""


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--strategy", default="luenberger", help="sof | luenberger | full | none")
    ap.add_argument("--reynolds", default="logspace:1:100:8", help="list or logspace:lo:hi:count")
    ap.add_argument("--m-list", default="3,5,7,9,11")
    ap.add_argument("--p-list", default="3,5,7,9,11")
    ap.add_argument("--n-nodes", type=int, default=128)
    ap.add_argument("--burn-in", type=float, default=300.0)
    ap.add_argument("--control-time", type=float, default=100.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--out-dir", default="out/success_map")
    ap.add_argument("--quick", action="store_true", help="64 nodes, burn 50, control 60")
    return ap.parse_args()


def main() -> int:
    args = parse_args()
    if args.quick:
        args.n_nodes, args.burn_in, args.control_time = 64, 50.0, 60.0
    text = TEMPLATE.format(
        n_nodes=args.n_nodes,
        burn_in=args.burn_in,
        control_time=args.control_time,
        reynolds=args.reynolds,
        m_list=args.m_list,
        p_list=args.p_list,
        strategy=args.strategy,
        seed=args.seed,
        workers=args.workers,
    )
    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(text)
        config_path = fh.name
    return cli_main(["sweep", "--config", config_path, "--out-dir", args.out_dir])


if __name__ == "__main__":
    sys.exit(main())
