"""Concentrability C0 versus task perturbation delta, one CSV row per (seed, delta).

    python benchmarks/c0_delta_sweep.py --out c0_sweep.csv [--seeds 20]

Reports the empirical trend only; the library makes no monotonicity claim.
"""
import argparse
from collections import defaultdict

import numpy as np

from metalab.harness.cli import write_csv_atomic
from metalab.harness.config import ExperimentConfig
from metalab.harness.experiments import C0_SWEEP_COLUMNS, c0_delta_sweep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rows = c0_delta_sweep(ExperimentConfig(seed=args.seed, n_seeds=args.seeds).validate())
    write_csv_atomic(args.out, C0_SWEEP_COLUMNS, rows)
    by_seed = defaultdict(list)
    for r in rows:
        by_seed[r["seed"]].append(r["c0"])
    monotone = sum(bool(np.all(np.diff(v) >= 0)) for v in by_seed.values())
    print(f"C0 non-decreasing in delta on {monotone}/{len(by_seed)} seeds")


if __name__ == "__main__":
    main()
