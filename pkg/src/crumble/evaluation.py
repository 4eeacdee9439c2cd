"""Experiment orchestration: simulate, detect, train, score and evaluate a run directory.

Every stage reads and writes files in the run directory, so the CLI verbs
and ``run_experiment`` share one code path. Metrics are recomputed from the
stored artifacts alone.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .detector import FEATURES, FILTERS, CandidateEvent, DetectorParams, binary_label, \
    calibrate_percentile_thresholds, detect
from .ground_truth import DEFAULT_GAP_NS, DEFAULT_XI, build_intervals, continuous_target, match_events
from .kernel import NS_PER_MS, NS_PER_S
from .labeler import (MLP, TEMPORAL_FEATURES, Dataset, LogisticModel, MLPConfig, RandomFourierFeatures,
                      RFFConfig, RobustScaler, TrainResult, chronological_split, predict, temporal_features,
                      train_mlp, train_rff)
from .lob import Side
from .metrics import classification_scores, roc_auc
from .simulation import REGIMES, MarketConfig, apply_regime, simulate

log = logging.getLogger(__name__)

DRIVERS = ("bernoulli", "hawkes")
METHODS = ("binary", "rff", "mlp", "mlp_no_temporal")
ALL_FEATURES = FEATURES + TEMPORAL_FEATURES


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    regime: str = "baseline"
    driver: str = "bernoulli"
    seed: int = 0
    sessions: int = 1
    session_hours: float = 2.0
    market: dict = field(default_factory=dict)  # overrides for MarketConfig
    detector: dict = field(default_factory=dict)  # overrides for DetectorParams
    mlp: dict = field(default_factory=dict)
    rff: dict = field(default_factory=dict)
    xi: float = DEFAULT_XI
    gt_gap_ms: float = DEFAULT_GAP_NS / NS_PER_MS
    theta_iou: float = 0.3
    delta_rec_s: float = 60.0
    target: str = "binary"  # or "continuous" (max IoU with a ground-truth interval)
    decision_threshold: float = 0.5

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.driver not in DRIVERS:
            raise ConfigError(f"unknown driver {self.driver!r}; choose from {DRIVERS}")
        if self.target not in ("binary", "continuous"):
            raise ConfigError("target must be 'binary' or 'continuous'")
        if self.sessions < 1 or self.session_hours <= 0:
            raise ConfigError("need at least one session of positive length")
        if not 0 < self.theta_iou <= 1:
            raise ConfigError("theta_iou must lie in (0, 1]")
        try:
            self.detector_params()
            MLPConfig(**self.mlp)
            RFFConfig(**self.rff)
            self.market_config(0)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def full_protocol(cls, **kw) -> "ExperimentConfig":
        """Five 6.5-hour sessions."""
        kw.setdefault("sessions", 5)
        kw.setdefault("session_hours", 6.5)
        return cls(**kw)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown experiment keys {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def session_seed(self, k: int) -> int:
        return self.seed + 7919 * k

    def market_config(self, k: int) -> MarketConfig:
        cfg = MarketConfig.from_dict(self.market)
        cfg.seed = self.session_seed(k)
        cfg.session_hours = self.session_hours
        cfg.market_maker.driver = self.driver
        return apply_regime(cfg, self.regime)

    def detector_params(self) -> DetectorParams:
        return DetectorParams(**self.detector)

    def resolved(self) -> dict:
        """Complete parameter set stored with every run."""
        return {"experiment": self.to_dict(),
                "market": self.market_config(0).to_dict(),
                "detector": asdict(self.detector_params()),
                "mlp": asdict(MLPConfig(**self.mlp)),
                "rff": asdict(RFFConfig(**self.rff))}


def load_config(path: Optional[str], **overrides) -> ExperimentConfig:
    d = {}
    if path:
        try:
            d = io.read_json(Path(path))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        d = d.get("experiment", d)
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _config_of(run_dir: Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(io.read_json(run_dir / "config.resolved.json")["experiment"])


# -- stage: simulate ---------------------------------------------------------------------

def stage_simulate(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Simulate every session; writes messages, snapshots, regime trace and ground truth."""
    run_dir.mkdir(parents=True, exist_ok=True)
    io.write_json(run_dir / "config.resolved.json", cfg.resolved())
    outs = [simulate(cfg.market_config(k)) for k in range(cfg.sessions)]
    close = cfg.market_config(0).close_ns
    io.write_messages(run_dir / "messages.jsonl", [o.messages for o in outs])
    io.write_snapshots(run_dir / "snapshots.csv", [o.snapshots for o in outs])
    io.write_regime(run_dir / "regime.csv", [o.regime for o in outs])
    truth = [build_intervals([(r.timestamp, r.beta) for r in o.regime], cfg.xi,
                             int(round(cfg.gt_gap_ms * NS_PER_MS)), close) for o in outs]
    write_ground_truth(run_dir / "ground_truth_events.csv", truth)
    return {"messages": [o.messages for o in outs], "snapshots": [o.snapshots for o in outs], "truth": truth}


def write_ground_truth(path: Path, truth: Sequence[dict]):
    rows = []
    for k, per_side in enumerate(truth):
        for side in (Side.BID, Side.ASK):
            rows.extend([k, side.value, iv.start, iv.end] for iv in per_side.get(side, []))
    io.write_table(path, ["session", "side", "start", "end"], rows)


def read_ground_truth(path: Path, sessions: int) -> list[dict]:
    out = [{Side.BID: [], Side.ASK: []} for _ in range(sessions)]
    for r in io.read_table(path):
        out[int(r["session"])][Side(r["side"])].append((int(r["start"]), int(r["end"])))
    return out


# -- stage: detect -------------------------------------------------------------------------

CANDIDATE_COLUMNS = (["event_id", "session", "side", "t0", "t1", "n_steps"] + list(FILTERS)
                     + ["gate", "missing", "rho"] + list(ALL_FEATURES)
                     + ["split", "label", "y", "target", "iou"])


def stage_detect(cfg: ExperimentConfig, run_dir: Path, messages=None, snapshots=None, truth=None) -> dict:
    """Detect candidates per session, attach ground-truth targets, temporal context,
    the chronological split and the binary rule (calibrated on the training split)."""
    if messages is None:
        messages = io.read_messages(run_dir / "messages.jsonl")
    if snapshots is None:
        snapshots = io.read_snapshots(run_dir / "snapshots.csv")
    if truth is None:
        truth = read_ground_truth(run_dir / "ground_truth_events.csv", cfg.sessions)
    params = cfg.detector_params()
    close = cfg.market_config(0).close_ns
    events: list[tuple[int, CandidateEvent]] = []
    temporal = []
    step_rows = []
    match_totals = {"tp": 0, "fp": 0, "fn": 0}
    match_sessions = []
    dropped = 0
    for k in range(cfg.sessions):
        det = detect(messages[k], snapshots[k], params, session=(0, close))
        dropped += det.dropped_boundary
        for side in (Side.BID, Side.ASK):
            step_rows.extend([k, s.time, side.value, s.pre, s.post, s.ticks, s.q_pre, s.q_post,
                              s.added, s.canceled, s.executed] for s in det.steps[side])
        pred = {side: [] for side in (Side.BID, Side.ASK)}
        index = {side: [] for side in (Side.BID, Side.ASK)}
        for i, e in enumerate(det.events):
            pred[e.side].append((e.t0, e.t1))
            index[e.side].append(i)
        rep = match_events(pred, truth[k], cfg.theta_iou)
        for key in match_totals:
            match_totals[key] += getattr(rep, key)
        match_sessions.append(rep.to_dict())
        y = np.zeros(len(det.events), dtype=np.int64)
        best = np.zeros(len(det.events))
        for side in (Side.BID, Side.ASK):
            for (pi, g, _), i in zip(rep.pairs[side], index[side]):
                y[i] = int(g is not None)
                best[i] = continuous_target((det.events[i].t0, det.events[i].t1), truth[k][side])
        for i, e in enumerate(det.events):
            e.label = int(y[i])
            e.target = float(best[i])
            events.append((k, e))
        ds = [e.features["DS"] for e in det.events]
        temporal.append(temporal_features([e.t0 for e in det.events], [e.t1 for e in det.events], ds,
                                          open_ns=0, window_s=cfg.delta_rec_s))
    tf = np.vstack(temporal) if events else np.zeros((0, 3))
    split = chronological_split(len(events))
    train_events = [e for (k, e), s in zip(events, split) if s == "train"]
    theta_ds, theta_rr = calibrate_percentile_thresholds(train_events, params)
    rows = []
    for i, ((k, e), s) in enumerate(zip(events, split)):
        rule = binary_label(e, params, theta_ds, theta_rr)
        target = float(e.label) if cfg.target == "binary" else e.target
        rows.append([i, k, e.side.value, e.t0, e.t1, e.n_steps] + [e.flags.get(f, False) for f in FILTERS]
                    + [e.gate, e.missing, e.rho] + [e.features[f] for f in FEATURES] + list(tf[i])
                    + [s, rule, e.label, target, e.target])
    io.write_table(run_dir / "candidates.csv", CANDIDATE_COLUMNS, rows)
    io.write_table(run_dir / "steps.csv", ["session", "timestamp", "side", "pre", "post", "ticks", "q_pre",
                                           "q_post", "added", "canceled", "executed"], step_rows)
    summary = {"theta_ds": theta_ds, "theta_rr": theta_rr, "dropped_boundary": dropped, **match_totals}
    io.write_json(run_dir / "detection.json", summary)
    tp, fp, fn = (match_totals[k] for k in ("tp", "fp", "fn"))
    io.write_json(run_dir / "match_report.json", {
        "theta_iou": cfg.theta_iou, **match_totals,
        "recall": tp / (tp + fn) if tp + fn else None,
        "precision": tp / (tp + fp) if tp + fp else None,
        "sessions": match_sessions})
    return summary


def read_candidates(run_dir: Path) -> dict:
    rows = io.read_table(run_dir / "candidates.csv")
    n = len(rows)
    x = np.array([[io.parse_float(r[f]) for f in ALL_FEATURES] for r in rows], dtype=np.float64).reshape(n, len(ALL_FEATURES))
    return {
        "rows": rows,
        "x": x,
        "gate": np.array([int(r["gate"]) for r in rows], dtype=np.int64),
        "y": np.array([int(r["y"]) for r in rows], dtype=np.int64),
        "target": np.array([float(r["target"]) for r in rows], dtype=np.float64),
        "label": np.array([int(r["label"]) for r in rows], dtype=np.int64),
        "split": np.array([r["split"] for r in rows], dtype=object),
    }


# -- stage: train ----------------------------------------------------------------------------

def feature_columns(method: str) -> list[int]:
    """Only the MLP encoder sees the temporal context; baselines use the event features."""
    return list(range(len(ALL_FEATURES))) if method == "mlp" else list(range(len(FEATURES)))


def stage_train(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Fit the MLP (with and without temporal context) and the RFF baseline; writes model.json."""
    c = read_candidates(run_dir)
    mlp_cfg, rff_cfg = MLPConfig(**cfg.mlp), RFFConfig(**cfg.rff)
    models, history_rows, status = {}, [], {}
    for method in ("mlp", "mlp_no_temporal", "rff"):
        cols = feature_columns(method)
        data = Dataset(c["x"][:, cols], c["gate"], c["target"], c["split"], c["y"])
        try:
            if method == "rff":
                res = train_rff(data, rff_cfg, cfg.seed)
            else:
                res = train_mlp(data, mlp_cfg, cfg.seed)
        except ValueError as exc:
            log.warning("%s not trained: %s", method, exc)
            status[method] = str(exc)
            continue
        status[method] = "ok"
        models[method] = model_to_dict(res, [ALL_FEATURES[i] for i in cols])
        history_rows.extend([method, h["epoch"], h["train_loss"], h["val_loss"], h["train_auc"], h["val_auc"]]
                            for h in res.history)
    doc = {"seed": cfg.seed, "config_digest": io.config_digest(cfg.resolved()),
           "gate": list(FILTERS), "target": cfg.target, "status": status, "models": models}
    io.write_json(run_dir / "model.json", doc)
    io.write_table(run_dir / "training_history.csv",
                   ["method", "epoch", "train_loss", "val_loss", "train_auc", "val_auc"], history_rows)
    return doc


def model_to_dict(res: TrainResult, features: list[str]) -> dict:
    d = {"features": features, "scaler": res.scaler.to_dict(), "gate_misses": res.gate_misses}
    if isinstance(res.model, MLP):
        d.update(kind="mlp", best_epoch=res.best_epoch, network=res.model.to_dict())
    else:
        rff = res.model.features
        d.update(kind="rff", bandwidth=rff.bandwidth, n_features=rff.n_features, w=rff.w.ravel().tolist(),
                 shape=list(rff.w.shape), coef=res.model.coef.tolist(), intercept=res.model.intercept)
    return d


def model_from_dict(d: dict) -> TrainResult:
    scaler = RobustScaler.from_dict(d["scaler"])
    if d["kind"] == "mlp":
        model = MLP.from_dict(d["network"])
    else:
        rff = RandomFourierFeatures(d["shape"][0], d["n_features"], d["bandwidth"])
        rff.w = np.asarray(d["w"], dtype=np.float64).reshape(d["shape"])
        model = LogisticModel(rff, np.asarray(d["coef"], dtype=np.float64), float(d["intercept"]))
    return TrainResult(model, scaler, [], d.get("best_epoch", -1), d.get("gate_misses", 0))


# -- stage: label (score) --------------------------------------------------------------------

def stage_label(cfg: ExperimentConfig, run_dir: Path) -> list[str]:
    """Gated probabilities for every candidate under each trained method; writes scores.csv."""
    c = read_candidates(run_dir)
    doc = io.read_json(run_dir / "model.json")
    methods = ["binary"] + [m for m in ("rff", "mlp", "mlp_no_temporal") if m in doc["models"]]
    probs = {"binary": c["label"].astype(np.float64)}
    for m in methods[1:]:
        res = model_from_dict(doc["models"][m])
        probs[m] = predict(res, c["x"][:, feature_columns(m)], c["gate"])
    header = ["event_id", "session", "side", "t0", "t1", "split", "gate", "y"] + [f"p_{m}" for m in methods]
    rows = []
    for i, r in enumerate(c["rows"]):
        rows.append([r["event_id"], r["session"], r["side"], r["t0"], r["t1"], r["split"],
                     c["gate"][i], c["y"][i]] + [probs[m][i] for m in methods])
    io.write_table(run_dir / "scores.csv", header, rows)
    return methods


# -- stage: evaluate ---------------------------------------------------------------------------

def inter_switch_cv(regime_sessions) -> Optional[float]:
    """Coefficient of variation of the times between regime switches."""
    gaps = []
    for trace in regime_sessions:
        t = np.array([r[0] for r in trace if r[2]], dtype=np.float64)
        gaps.extend(np.diff(t).tolist())
    if len(gaps) < 2:
        return None
    g = np.asarray(gaps)
    return float(g.std() / g.mean())


def metrics_from_artifacts(run_dir: Path, decision_threshold: float = 0.5) -> dict:
    """Metrics as a pure function of scores.csv, ground_truth_events.csv and regime.csv."""
    rows = io.read_table(run_dir / "scores.csv")
    methods = [k[2:] for k in io.read_header(run_dir / "scores.csv") if k.startswith("p_")]
    test = [r for r in rows if r["split"] == "test"]
    y = np.array([int(r["y"]) for r in test], dtype=np.int64)
    out = {"methods": {}}
    for m in methods:
        p = np.array([float(r[f"p_{m}"]) for r in test], dtype=np.float64)
        roc, auc = roc_auc(p, y)
        cls = classification_scores(p >= decision_threshold, y)
        out["methods"][m] = {"auc": auc, "roc": roc, **cls}
    n_gt = len(io.read_table(run_dir / "ground_truth_events.csv"))
    y_all = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    gate_all = np.array([int(r["gate"]) for r in rows], dtype=np.int64)
    tp = int(y_all.sum())
    out["detection"] = {
        "candidates": len(rows), "ground_truth": n_gt, "tp": tp, "fp": len(rows) - tp, "fn": n_gt - tp,
        "recall": tp / n_gt if n_gt else None,
        "precision": tp / len(rows) if rows else None,
    }
    out["events"] = {"train": sum(r["split"] == "train" for r in rows),
                     "val": sum(r["split"] == "val" for r in rows), "test": len(test),
                     "test_positive": int(y.sum()), "gate_pass": int(gate_all.sum())}
    out["gate_misses"] = int(np.sum((y_all == 1) & (gate_all == 0)))
    regime = io.read_regime(run_dir / "regime.csv")
    out["regime"] = {"switches": sum(int(r[2]) for s in regime for r in s), "inter_switch_cv": inter_switch_cv(regime)}
    return out


def stage_evaluate(cfg: ExperimentConfig, run_dir: Path) -> dict:
    metrics = metrics_from_artifacts(run_dir, cfg.decision_threshold)
    io.write_json(run_dir / "metrics.json", metrics)
    return metrics


# -- full pipeline -------------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, run_dir) -> dict:
    """simulate -> ground truth -> detect -> calibrate -> train -> score -> evaluate."""
    run_dir = Path(run_dir)
    timings = {}
    sim = None
    for stage in ("simulate", "detect", "train", "label", "evaluate"):
        t = time.perf_counter()
        try:
            if stage == "simulate":
                sim = stage_simulate(cfg, run_dir)
            elif stage == "detect":
                stage_detect(cfg, run_dir, sim["messages"], sim["snapshots"], sim["truth"])
                sim = None
            elif stage == "train":
                stage_train(cfg, run_dir)
            elif stage == "label":
                stage_label(cfg, run_dir)
            else:
                metrics = stage_evaluate(cfg, run_dir)
        except Exception as exc:
            raise StageError(stage, exc) from exc
        timings[stage] = time.perf_counter() - t
    log.info("run %s finished in %.1fs %s", run_dir, sum(timings.values()),
             {k: round(v, 2) for k, v in timings.items()})
    return metrics


# -- sweeps ---------------------------------------------------------------------------------------

def run_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.regime}_{cfg.driver}/seed_{cfg.seed}"


def _run_one(args):
    d, out = args
    cfg = ExperimentConfig.from_dict(d)
    path = Path(out) / run_name(cfg)
    return run_name(cfg), run_experiment(cfg, path)


def sweep(base: ExperimentConfig, regimes: Sequence[str], drivers: Sequence[str], seeds: Sequence[int],
          out_dir, workers: int = 1) -> list[dict]:
    """Run every (regime, driver, seed) combination and write aggregate.csv."""
    if not regimes or not drivers or not seeds:
        raise ConfigError("empty sweep")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for r in regimes:
        for d in drivers:
            for s in seeds:
                cfg = base.to_dict()
                cfg.update(regime=r, driver=d, seed=int(s))
                ExperimentConfig.from_dict(cfg)
                jobs.append((cfg, str(out_dir)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return write_aggregate(out_dir, [j[0] for j in jobs], [m for _, m in results])


AGGREGATE_COLUMNS = ["regime", "driver", "seed", "method", "auc", "precision", "recall", "f1",
                     "n_test", "detection_recall", "inter_switch_cv"]


def write_aggregate(out_dir: Path, configs: Sequence[dict], metrics: Sequence[dict]) -> list[dict]:
    rows = []
    for cfg, m in zip(configs, metrics):
        for method, v in m["methods"].items():
            rows.append({"regime": cfg["regime"], "driver": cfg["driver"], "seed": str(cfg["seed"]),
                         "method": method, "auc": v["auc"], "precision": v["precision"], "recall": v["recall"],
                         "f1": v["f1"], "n_test": m["events"]["test"],
                         "detection_recall": m["detection"]["recall"],
                         "inter_switch_cv": m["regime"]["inter_switch_cv"]})
    summary = []
    keys = sorted({(r["regime"], r["driver"], r["method"]) for r in rows},
                  key=lambda k: (k[0], k[1], METHODS.index(k[2]) if k[2] in METHODS else 99))
    for key in keys:
        group = [r for r in rows if (r["regime"], r["driver"], r["method"]) == key]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            row = {"regime": key[0], "driver": key[1], "seed": stat, "method": key[2]}
            for col in AGGREGATE_COLUMNS[4:]:
                vals = [float(r[col]) for r in group if r[col] is not None]
                row[col] = float(fn(vals)) if vals else None
            summary.append(row)
    table = rows + summary
    io.write_table(out_dir / "aggregate.csv", AGGREGATE_COLUMNS, ([r[c] for c in AGGREGATE_COLUMNS] for r in table))
    return table


def mean_auc(table: Sequence[dict], regime: str, driver: str, method: str) -> Optional[float]:
    for r in table:
        if (r["regime"], r["driver"], r["method"], r["seed"]) == (regime, driver, method, "mean"):
            return None if r["auc"] in (None, "") else float(r["auc"])
    return None
