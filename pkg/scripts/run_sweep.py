"""Time-discretization sweep: subsample every k-th point with lambda_k = k * lambda.

Example::

    python scripts/run_sweep.py --process exp_decay_b1 --k 1 2 5 10 --seeds 0 1 2
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from sde_recover.evaluation import NON_LEARNED, reference_suite, rows_to_table_csv
from sde_recover.evaluation import time_discretization_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--process", default="exp_decay_b1",
                    help="experiment label from the catalog suite")
    ap.add_argument("--k", type=int, nargs="+", default=list(range(1, 11)))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--methods", nargs="+", default=[NON_LEARNED])
    ap.add_argument("--gd-max-iters", type=int, default=20_000)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labelled = []
    for seed in args.seeds:
        spec = next(s for s in reference_suite(n=args.n, seed=seed) if s.label == args.process)
        spec = spec.replace(methods=tuple(args.methods),
                            fit_config={"gd_max_iters": args.gd_max_iters})
        sweep = time_discretization_sweep(spec, args.k)
        labelled += [(spec.label, r) for r in sweep.rows]
    rows_to_table_csv(labelled, out / "table.csv")

    print(f"\n{'k':>3} {'method':<18}{'lambda':>10}{'L':>9}{'delta_f':>10}{'delta_sigma':>13}")
    for k in args.k:
        for method in args.methods:
            rows = [r for _, r in labelled if r.k == k and r.method == method]
            med = [np.median([getattr(r, a) for r in rows])
                   for a in ("likelihood", "delta_f", "delta_sigma")]
            print(f"{k:>3} {method:<18}{rows[0].lam:>10.2e}{med[0]:>9.3f}{med[1]:>10.3f}"
                  f"{med[2]:>13.3f}")


if __name__ == "__main__":
    main()
