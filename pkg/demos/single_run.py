"""Run one short baseline session end to end and print the headline metrics.

    python3 demos/single_run.py --hours 0.5 --out runs/demo
"""

import argparse
import logging

from crumble.evaluation import ExperimentConfig, run_experiment
from crumble.report import price_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--regime", default="baseline")
    ap.add_argument("--out", default="runs/demo")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ExperimentConfig(regime=args.regime, seed=args.seed, session_hours=args.hours)
    metrics = run_experiment(cfg, args.out)
    det = metrics["detection"]
    print(f"candidates {det['candidates']}, ground-truth intervals {det['ground_truth']}")
    for name, m in metrics["methods"].items():
        auc = "n/a" if m["auc"] is None else f"{m['auc']:.3f}"
        print(f"{name:>16}  AUC {auc}")
    print("price trace:", price_trace(args.out, f"{args.out}/price_trace.svg"))


if __name__ == "__main__":
    main()
