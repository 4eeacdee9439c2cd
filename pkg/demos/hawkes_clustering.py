"""Compare regime-switch clustering under the Bernoulli and Hawkes drivers,
and the value of temporal context features for the MLP under each."""

import argparse
import logging

import numpy as np

from crumble import io
from crumble.evaluation import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/hawkes")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    for driver in ("bernoulli", "hawkes"):
        out = f"{args.out}/{driver}"
        m = run_experiment(ExperimentConfig(driver=driver, seed=args.seed, session_hours=args.hours), out)
        starts = [r[0] / 1e9 for s in io.read_regime(f"{out}/regime.csv") for r in s if r[2]]
        gaps = np.diff(starts)
        print(f"{driver}: {m['regime']['switches']} switches, inter-switch CV {m['regime']['inter_switch_cv']}, "
              f"median gap {np.median(gaps) if len(gaps) else float('nan'):.1f}s")
        for name in ("mlp", "mlp_no_temporal"):
            print(f"   {name:>16} AUC {m['methods'][name]['auc']}")


if __name__ == "__main__":
    main()
