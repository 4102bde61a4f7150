"""Run the catalog experiments over several seeds and print a median table.

Example::

    python scripts/run_reference_suite.py --n 300 --seeds 0 1 2 --gd-max-iters 20000 --out runs/suite
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from sde_recover.evaluation import METHODS, reference_suite, rows_to_table_csv, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=300, help="train and test size")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--gd-max-iters", type=int, default=20_000)
    ap.add_argument("--labels", nargs="*", help="subset of experiment labels")
    ap.add_argument("--out", default="runs/reference_suite")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labelled = []
    for seed in args.seeds:
        for spec in reference_suite(n=args.n, seed=seed,
                                fit_config={"gd_max_iters": args.gd_max_iters}):
            if args.labels and spec.label not in args.labels:
                continue
            res = run_experiment(spec)
            labelled += [(spec.label, r) for r in res.rows]
            for method, pred in res.predictions.items():
                pred.to_csv(out / f"{spec.label}_seed{seed}_{method}.csv")
    rows_to_table_csv(labelled, out / "table.csv")

    print(f"\n{'experiment':<16}{'method':<18}{'L':>9}{'delta_f':>10}{'delta_sigma':>13}")
    for label in dict.fromkeys(lab for lab, _ in labelled):
        for method in METHODS:
            rows = [r for lab, r in labelled if lab == label and r.method == method]
            if not rows:
                continue
            med = [np.median([getattr(r, a) for r in rows])
                   for a in ("likelihood", "delta_f", "delta_sigma")]
            print(f"{label:<16}{method:<18}{med[0]:>9.3f}{med[1]:>10.3f}{med[2]:>13.3f}")


if __name__ == "__main__":
    main()
