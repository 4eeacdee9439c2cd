"""Command-line entry point: ``crumble <verb> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .evaluation import (DRIVERS, ConfigError, ExperimentConfig, StageError, load_config, run_experiment,
                         stage_detect, stage_evaluate, stage_label, stage_simulate, stage_train, sweep)
from .simulation import REGIMES

VERBS = ("simulate", "detect", "label", "train", "evaluate", "sweep", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/default", help="run (or sweep) directory")
    common.add_argument("--regime", choices=REGIMES)
    common.add_argument("--driver", choices=DRIVERS)
    common.add_argument("--hours", type=float, help="session length in hours (default 2)")
    common.add_argument("--sessions", type=int, help="number of sessions (default 1)")
    common.add_argument("--full", action="store_true", help="five 6.5-hour sessions instead of one 2-hour session")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="crumble", description="Crumbling-quote simulation, detection and labelling.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="simulate sessions into a run directory")
    sub.add_parser("detect", parents=[common], help="detect candidates from messages and snapshots")
    sub.add_parser("train", parents=[common], help="train the labeler and baselines on candidates.csv")
    sub.add_parser("label", parents=[common], help="write gated probabilities to scores.csv")
    sub.add_parser("evaluate", parents=[common], help="compute metrics.json from scores.csv")
    sub.add_parser("run", parents=[common], help="all stages in order")
    sw = sub.add_parser("sweep", parents=[common], help="regimes x drivers x seeds")
    sw.add_argument("--regimes", nargs="*", default=None)
    sw.add_argument("--drivers", nargs="*", default=None)
    sw.add_argument("--seeds", nargs="*", type=int, default=None)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--no-report", action="store_true")
    sub.add_parser("report", parents=[common], help="figures and summary for a sweep directory")
    return p


def _experiment(args, run_dir: Path, fresh: bool):
    """Config for a run: from the run directory when it exists, else from flags."""
    overrides = {"seed": args.seed, "regime": args.regime, "driver": args.driver,
                 "session_hours": args.hours, "sessions": args.sessions}
    if args.full:
        overrides.update(sessions=5, session_hours=6.5)
    stored = run_dir / "config.resolved.json"
    if not fresh and args.config is None and stored.exists():
        d = io.read_json(stored)["experiment"]
        d.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig.from_dict(d)
    return load_config(args.config, **overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"crumble: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.verb == "report":
            from .report import make_report
            make_report(out)
            return 0
        cfg = _experiment(args, out, fresh=args.verb in ("simulate", "run", "sweep"))
        if args.verb == "simulate":
            stage_simulate(cfg, out)
        elif args.verb == "detect":
            print(io.dumps(stage_detect(cfg, out)), end="")
        elif args.verb == "train":
            doc = stage_train(cfg, out)
            print(io.dumps(doc["status"]), end="")
        elif args.verb == "label":
            stage_label(cfg, out)
        elif args.verb == "evaluate":
            m = stage_evaluate(cfg, out)
            print(io.dumps({k: v["auc"] for k, v in m["methods"].items()}), end="")
        elif args.verb == "run":
            m = run_experiment(cfg, out)
            print(io.dumps({k: v["auc"] for k, v in m["methods"].items()}), end="")
        elif args.verb == "sweep":
            regimes = args.regimes if args.regimes is not None else [cfg.regime]
            drivers = args.drivers if args.drivers is not None else [cfg.driver]
            seeds = args.seeds if args.seeds is not None else [cfg.seed]
            bad = [r for r in regimes if r not in REGIMES] + [d for d in drivers if d not in DRIVERS]
            if bad:
                raise ConfigError(f"unknown regime/driver {bad}")
            sweep(cfg, regimes, drivers, seeds, out, args.workers)
            if not args.no_report:
                from .report import make_report
                make_report(out)
    except (ConfigError, UsageError) as exc:
        print(f"crumble: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"crumble: missing input: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"crumble: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"crumble: runtime failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
