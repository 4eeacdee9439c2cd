"""Acceptance suite: one or more tests per criterion, summarised per criterion at the end of the run.

Simulation-backed criteria share a session cache of runs, executed one at a time.
Set CRUMBLE_ACCEPTANCE_DIR to keep the run directories after the session.
"""

import math
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from crumble import io
from crumble.agents import HawkesIntensity
from crumble.detector import DetectorParams, calibrate_percentile_thresholds
from crumble.evaluation import ExperimentConfig, run_experiment, stage_detect
from crumble.ground_truth import iou, match_side, merge_spans
from crumble.labeler import MLP, PARAM_ORDER, MLPConfig, RobustScaler, temporal_features
from crumble.lob import OrderBook, Side
from crumble.metrics import auc_score, roc_curve
from fuzz import random_log
from oracles import auc_pairs, greedy_match, hawkes_sum, iou_cells, merge_cells, quantile_type7, robust_scale, \
    temporal_scan
from test_detector import gated_event

S = 1_000_000_000
N_ORACLE = 200
SEEDS = (0, 1, 2)
BASE_HOURS = 2.0
HAWKES_HOURS = 6.0
FLOAT_TOL = 1e-10


def close(got, ref, tol=FLOAT_TOL):
    return got == ref or abs(got - ref) <= tol * abs(ref)


# -- run cache -------------------------------------------------------------------------------

class Runs:
    def __init__(self, root: Path):
        self.root = root
        self.done = {}

    def get(self, regime, driver, seed, hours):
        key = (regime, driver, seed, hours)
        if key not in self.done:
            cfg = ExperimentConfig(regime=regime, driver=driver, seed=seed, session_hours=hours)
            path = self.root / f"{regime}_{driver}_h{hours:g}" / f"seed_{seed}"
            t = time.perf_counter()
            metrics = run_experiment(cfg, path)
            self.done[key] = (path, metrics, time.perf_counter() - t)
        return self.done[key]

    def auc(self, regime, driver, seed, hours, method):
        return self.get(regime, driver, seed, hours)[1]["methods"][method]["auc"]

    def mean_auc(self, regime, driver, hours, method):
        return float(np.mean([self.auc(regime, driver, s, hours, method) for s in SEEDS]))


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    root = os.environ.get("CRUMBLE_ACCEPTANCE_DIR")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    return Runs(root)


# -- 1: accounting identity ------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_accounting_identity_fuzzed(note):
    from crumble.lob import FlowLedger
    rng = np.random.default_rng(2024)
    msgs = random_log(rng, 100_000)
    t_end = msgs[-1].timestamp
    intervals = sorted((int(a), int(b)) for a, b in
                       (np.sort(rng.integers(0, t_end + 1, 2)) for _ in range(1000)))
    start = time.perf_counter()
    ledger = FlowLedger.from_messages(msgs)
    # depth at every query time from an independent single replay of the book
    times = sorted({t for iv in intervals for t in iv})
    depth_at, book, i = {}, OrderBook(), 0
    for t in times:
        while i < len(msgs) and msgs[i].timestamp <= t:
            book.apply(msgs[i])
            i += 1
        depth_at[t] = {(s, p): q for s in (Side.BID, Side.ASK) for p, q in book.levels(s).items()}
    keys = list(ledger.keys())
    bad = 0
    for u, v in intervals:
        for side, price in keys:
            a, c, e = ledger.volumes(side, price, u, v)
            dq = depth_at[v].get((side, price), 0) - depth_at[u].get((side, price), 0)
            bad += dq != a - c - e
    elapsed = time.perf_counter() - start
    note(1, f"{len(intervals)} intervals x {len(keys)} levels, {bad} violations, {elapsed:.2f}s")
    assert bad == 0
    assert elapsed < 10.0


# -- 2: determinism ----------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_byte_identical_artifacts(tmp_path, note):
    cfg = ExperimentConfig(seed=11, session_hours=0.5)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    names = ["messages.jsonl", "candidates.csv", "model.json", "metrics.json"]
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    note(2, f"{sum(same)}/{len(names)} files identical")
    assert all(same)


# -- 3: oracle equivalence -----------------------------------------------------------------------

def random_span(rng, lo=0, hi=60, max_len=30, allow_empty=True):
    a = int(rng.integers(lo, hi))
    return a, a + int(rng.integers(0 if allow_empty else 1, max_len + 1))


@pytest.mark.criterion(3)
def test_oracle_iou():
    rng = np.random.default_rng(31)
    for _ in range(N_ORACLE):
        a, b = random_span(rng), random_span(rng)
        assert iou(a, b) == iou_cells(a, b)


@pytest.mark.criterion(3)
def test_oracle_merge():
    rng = np.random.default_rng(32)
    for _ in range(N_ORACLE):
        spans = [random_span(rng, allow_empty=False) for _ in range(int(rng.integers(0, 12)))]
        gap = int(rng.integers(1, 9))
        assert merge_spans(spans, gap) == merge_cells(spans, gap)


@pytest.mark.criterion(3)
def test_oracle_matching():
    rng = np.random.default_rng(33)
    for _ in range(N_ORACLE):
        pred = [random_span(rng, allow_empty=False) for _ in range(int(rng.integers(0, 9)))]
        truth = [random_span(rng, allow_empty=False) for _ in range(int(rng.integers(0, 9)))]
        theta = [Fraction(1, 10), Fraction(3, 10), Fraction(1, 2)][int(rng.integers(0, 3))]
        got = {i: g for i, (g, _) in enumerate(match_side(pred, truth, theta)) if g is not None}
        assert got == greedy_match(pred, truth, theta)


def roc_points_bruteforce(scores, labels):
    """(FPR, TPR) at every distinct threshold, by direct counting."""
    pos, neg = sum(labels), len(labels) - sum(labels)
    pts = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= thr and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= thr and not y)
        pts.append((fp / neg, tp / pos))
    return pts


@pytest.mark.criterion(3)
def test_oracle_roc_auc():
    rng = np.random.default_rng(34)
    for k in range(N_ORACLE):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, n).tolist()
        labels[0], labels[1] = 0, 1
        # alternate coarse (tied) and continuous scores
        scores = (rng.integers(0, 6, n) / 5.0 if k % 2 else rng.random(n)).tolist()
        assert close(auc_score(scores, labels), auc_pairs(scores, labels))
        fpr, tpr, _ = roc_curve(scores, labels)
        ref = roc_points_bruteforce(scores, labels)
        assert len(ref) == len(fpr)
        assert all(close(a, r[0]) and close(b, r[1]) for a, b, r in zip(fpr, tpr, ref))


@pytest.mark.criterion(3)
def test_oracle_percentile_thresholds():
    rng = np.random.default_rng(35)
    p = DetectorParams(min_calibration_events=1)
    for _ in range(N_ORACLE):
        n = int(rng.integers(1, 80))
        ds, rr = rng.exponential(300.0, n), rng.random(n) * 5
        evs = [gated_event(float(a), float(b)) for a, b in zip(ds, rr)]
        got = calibrate_percentile_thresholds(evs, p)
        q = p.calibration_percentile / 100
        assert close(got[0], quantile_type7(ds.tolist(), q))
        assert close(got[1], quantile_type7(rr.tolist(), q))


@pytest.mark.criterion(3)
def test_oracle_robust_scaling():
    rng = np.random.default_rng(36)
    for _ in range(N_ORACLE):
        n, d = int(rng.integers(2, 60)), int(rng.integers(1, 5))
        train = rng.normal(0, 10.0 ** rng.integers(-3, 4), (n, d))
        probe = rng.normal(0, 10, (5, d))
        got = RobustScaler().fit(train).transform(probe)
        for j in range(d):
            for i in range(5):
                assert close(got[i, j], robust_scale(train[:, j].tolist(), probe[i, j]))


@pytest.mark.criterion(3)
def test_oracle_hawkes_intensity():
    rng = np.random.default_rng(37)
    for _ in range(N_ORACLE):
        mu, alpha, decay = rng.uniform(0.01, 2), rng.uniform(0, 2), rng.uniform(0.01, 2)
        times = np.sort(rng.uniform(0, 500, int(rng.integers(0, 60)))).tolist()
        h = HawkesIntensity(mu, alpha, decay)
        for t in times:
            h.add_event(t)
        t = (times[-1] if times else 0.0) + rng.uniform(1e-6, 20)
        assert close(h.intensity(t), hawkes_sum(mu, alpha, decay, times, t))


@pytest.mark.criterion(3)
def test_oracle_temporal_features():
    rng = np.random.default_rng(38)
    for _ in range(N_ORACLE):
        n = int(rng.integers(0, 40))
        a = rng.integers(0, 200, n)
        rows = sorted(zip(a, a + rng.integers(0, 20, n), rng.exponential(100.0, n)), key=lambda r: r[1])
        starts = [int(x) * S for x, _, _ in rows]
        ends = [int(y) * S for _, y, _ in rows]
        ds = [float(v) for _, _, v in rows]
        window = int(rng.integers(1, 90))
        got = temporal_features(starts, ends, ds, window_s=window)
        for g, (dt, cnt, sds) in zip(got, temporal_scan(starts, ends, ds, 0, window * S)):
            assert g[0] == dt / S and g[1] == cnt and close(g[2], sds)


# -- 4: gradient check ----------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_mlp_gradient_check(note):
    rng = np.random.default_rng(4)
    m = MLP(9, MLPConfig(dropout=0.1), seed=4)
    theta = m.flat()
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(32, 9))
        y = rng.integers(0, 2, 32).astype(np.float64)
        gate = (rng.random(32) < 0.8).astype(np.int64)
        y[gate == 0] = 0
        # no rng passed: dropout off
        _, grads = m.loss_and_grads(x, y, gate)
        g = np.concatenate([grads[k].ravel() for k in PARAM_ORDER])
        num = np.empty_like(theta)
        h = 1e-6
        for i in range(len(theta)):
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            m.set_flat(up)
            f_up = m.loss_and_grads(x, y, gate)[0]
            m.set_flat(down)
            num[i] = (f_up - m.loss_and_grads(x, y, gate)[0]) / (2 * h)
        m.set_flat(theta)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-300))
    note(4, f"{len(theta)} parameters, worst rel. err {worst:.1e}")
    assert worst <= 1e-4


# -- 5: detector recall and LOB-only invariance ------------------------------------------------------

@pytest.mark.criterion(5)
def test_detector_recall_baseline(runs, note):
    path, _, _ = runs.get("baseline", "bernoulli", 0, BASE_HOURS)
    rep = io.read_json(path / "match_report.json")
    note(5, f"recall {rep['recall']:.3f} (tp {rep['tp']}, fn {rep['fn']})")
    assert rep["theta_iou"] == 0.3
    assert rep["recall"] >= 0.5


@pytest.mark.criterion(5)
def test_detector_lob_only_on_baseline_run(runs, tmp_path):
    path, _, _ = runs.get("baseline", "bernoulli", 0, BASE_HOURS)
    cfg = ExperimentConfig(regime="baseline", seed=0, session_hours=BASE_HOURS)
    msgs = io.read_messages(path / "messages.jsonl", strip_agents=True)
    snaps = io.read_snapshots(path / "snapshots.csv")
    # no identities and no regime information: an empty ground truth
    empty = [{Side.BID: [], Side.ASK: []} for _ in msgs]
    stage_detect(cfg, tmp_path, msgs, snaps, empty)
    ref = io.read_table(path / "candidates.csv")
    got = io.read_table(tmp_path / "candidates.csv")
    assert len(got) == len(ref) > 0
    outcome = {"y", "target", "iou"}
    for a, b in zip(got, ref):
        assert {k: v for k, v in a.items() if k not in outcome} == {k: v for k, v in b.items() if k not in outcome}


# -- 6, 7: AUC ordering --------------------------------------------------------------------------------

def ordering(runs, regime, note, n):
    means = {m: runs.mean_auc(regime, "bernoulli", BASE_HOURS, m) for m in ("mlp", "rff", "binary")}
    note(n, f"{regime}: mlp {means['mlp']:.3f} rff {means['rff']:.3f} binary {means['binary']:.3f}")
    return means


@pytest.mark.criterion(6)
def test_baseline_ordering_and_runtime(runs, note):
    seconds = sum(runs.get("baseline", "bernoulli", s, BASE_HOURS)[2] for s in SEEDS)
    m = ordering(runs, "baseline", note, 6)
    note(6, f"{seconds:.0f}s for {len(SEEDS)} runs")
    assert m["mlp"] > m["rff"] > m["binary"]
    assert m["mlp"] - m["binary"] >= 0.10
    assert seconds < 600


@pytest.mark.criterion(7)
@pytest.mark.parametrize("regime,margin", [("bull", 0.0), ("bear", 0.0), ("high_vol", 0.05)])
def test_regime_ordering(runs, note, regime, margin):
    m = ordering(runs, regime, note, 7)
    assert m["mlp"] > m["rff"] > m["binary"]
    assert m["mlp"] - m["binary"] >= margin


# -- 8: Hawkes driver -----------------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_hawkes_clustering(runs, note):
    cvs = [runs.get("baseline", "hawkes", s, HAWKES_HOURS)[1]["regime"]["inter_switch_cv"] for s in SEEDS]
    note(8, "CV " + "/".join(f"{c:.2f}" for c in cvs))
    assert all(c is not None and c > 1 for c in cvs)


@pytest.mark.criterion(8)
def test_hawkes_temporal_features_help(runs, note):
    with_t = runs.mean_auc("baseline", "hawkes", HAWKES_HOURS, "mlp")
    without = runs.mean_auc("baseline", "hawkes", HAWKES_HOURS, "mlp_no_temporal")
    note(8, f"mlp {with_t:.3f} vs mlp_no_temporal {without:.3f}")
    assert with_t >= without


# -- 9: gate dominance ------------------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_gate_dominance_everywhere(runs, note):
    files = sorted(runs.root.rglob("scores.csv"))
    assert files, "no runs were produced"
    checked = 0
    for f in files:
        for r in io.read_table(f):
            if r["gate"] == "0":
                checked += 1
                assert all(float(v) == 0.0 for k, v in r.items() if k.startswith("p_")), f
    note(9, f"{len(files)} files, {checked} gated-out rows")
