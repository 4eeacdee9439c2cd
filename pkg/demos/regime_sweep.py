"""Sweep the four regimes over a few seeds and build the figure report.

Defaults are small enough for a laptop (about a minute per run-hour).
"""

import argparse
import logging

from crumble.evaluation import ExperimentConfig, sweep
from crumble.report import make_report


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--regimes", nargs="+", default=["baseline", "bull", "bear", "high_vol"])
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    table = sweep(ExperimentConfig(session_hours=args.hours), args.regimes, ["bernoulli"], args.seeds, args.out)
    for row in (r for r in table if r["seed"] == "mean"):
        auc = "n/a" if row["auc"] is None else f"{row['auc']:.3f}"
        print(f"{row['regime']:>9} {row['method']:>16} AUC {auc}")
    for path in make_report(args.out):
        print("wrote", path)


if __name__ == "__main__":
    main()
