from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crumble.detector import (FEATURES, BookHistory, CandidateEvent, DeteriorationStep, DetectorParams,
                              EfficientPrice, binary_label, calibrate_percentile_thresholds, cluster_steps,
                              depletion_ok, detect, microprice, traversed_levels)
from crumble.kernel import NS_PER_MS, NS_PER_S, Exchange, SnapshotStream
from crumble.lob import Kind, MarketMessage, Side
from oracles import quantile_type7

MS = NS_PER_MS


def book_stream(msgs, levels=5):
    """Feed messages straight into an exchange and return its log and snapshot stream."""
    ex = Exchange(snapshot_levels=levels)
    ex.snapshots.record(0, ex.book, ex._totals)
    for m in msgs:
        ex._handle_order(m.timestamp, m)
    return ex.log, SnapshotStream.from_rows(ex.snapshots.rows, levels)


def crumble_scenario(refill=True, agent=3):
    """Bid walked down four levels by cancels inside 150 ms, then restored."""
    msgs, oid = [], 1
    for k in range(5):
        msgs.append(MarketMessage(0, Kind.LIMIT_ADD, Side.BID, 100, oid, 10_000 - k, agent))
        msgs.append(MarketMessage(0, Kind.LIMIT_ADD, Side.ASK, 100, oid + 1, 10_001 + k, agent))
        oid += 2
    # filler updates far from the touch give the book history a regular grid
    for j in range(1, 100):
        msgs.append(MarketMessage(j * 100 * MS, Kind.LIMIT_ADD, Side.ASK, 1, 1000 + j, 10_020, 9))
    t0 = 3 * NS_PER_S + 10 * MS
    for k in range(4):
        msgs.append(MarketMessage(t0 + 50 * k * MS, Kind.CANCEL, Side.BID, 100, 1 + 2 * k, 10_000 - k, agent))
    if refill:
        for k in range(4):
            msgs.append(MarketMessage(t0 + 400 * MS, Kind.LIMIT_ADD, Side.BID, 100, 500 + k, 10_000 - k, agent))
    msgs.sort(key=lambda m: m.timestamp)
    return msgs, t0


def test_depletion_inequalities():
    p = DetectorParams()
    assert depletion_ok(100, 0, 0, 100, 0, p)
    assert depletion_ok(100, 5, 0, 60, 35, p)
    assert not depletion_ok(100, 6, 0, 100, 0, p)  # too much left
    assert not depletion_ok(100, 0, 0, 89, 0, p)  # leak beyond eps_leak
    assert not depletion_ok(100, 0, 16, 100, 0, p)  # replenished


def step(t, side=Side.BID, pre=100, ticks=1):
    return DeteriorationStep(t, side, pre, pre + side.sign * ticks, ticks, 10, 0, 0, 10, 0)


def test_cluster_gap_and_min_steps():
    p = DetectorParams(gap_ms=200, min_steps=3, max_duration_s=2.0)
    ts = [0, 100, 300, 500, 901, 1000]
    evs = cluster_steps([step(t * MS) for t in ts], p)
    assert [(e.t0 // MS, e.t1 // MS, e.n_steps) for e in evs] == [(0, 500, 4)]


def test_cluster_split_at_max_duration():
    p = DetectorParams(gap_ms=200, min_steps=1, max_duration_s=0.5)
    evs = cluster_steps([step(t * MS) for t in range(0, 1000, 150)], p)
    assert [(e.t0 // MS, e.t1 // MS) for e in evs] == [(0, 450), (600, 900)]


def test_traversed_levels():
    side = Side.BID
    ev = CandidateEvent(side, 0, 1, [step(0, side, 100, 2), step(1, side, 98, 1)])
    # 100 -> 98 -> 97: the final resting best 97 is not traversed
    assert traversed_levels(ev) == (98, 99, 100)


def test_microprice():
    assert microprice(100, 102, 30, 10) == pytest.approx(101.5)
    assert microprice(100, 102, 10, 10) == 101.0


def test_efficient_price_half_life():
    h = BookHistory([0, 10 * NS_PER_S], [100, 110], [102, 112], [10, 10], [10, 10])
    eff = EfficientPrice(h, half_life_ms=1000.0)
    assert eff.at(5 * NS_PER_S) == pytest.approx(0.0)
    # one half-life after the jump the EMA has covered half of it
    assert eff.at(11 * NS_PER_S) == pytest.approx(5.0)
    assert eff.at(12 * NS_PER_S) == pytest.approx(7.5)


def test_detects_transient_crumble():
    msgs, t0 = crumble_scenario()
    log, snaps = book_stream(msgs)
    det = detect(log, snaps, DetectorParams(), session=(0, 10 * NS_PER_S))
    (ev,) = det.events
    assert ev.side is Side.BID and (ev.t0, ev.t1) == (t0, t0 + 150 * MS)
    assert ev.gate == 1 and not ev.missing
    assert ev.features["WD"] == 4.0
    assert ev.features["DS"] == pytest.approx(400 / 0.15)
    assert ev.rho < 0.6


def test_persistent_move_fails_transience():
    msgs, _ = crumble_scenario(refill=False)
    log, snaps = book_stream(msgs)
    (ev,) = detect(log, snaps, DetectorParams(), session=(0, 10 * NS_PER_S)).events
    assert not ev.flags["trans"] and ev.gate == 0
    assert binary_label(ev, DetectorParams()) == 0


def test_boundary_events_dropped():
    msgs, _ = crumble_scenario()
    log, snaps = book_stream(msgs)
    det = detect(log, snaps, DetectorParams(), session=(0, 3 * NS_PER_S + 500 * MS))
    assert det.events == [] and det.dropped_boundary == 1


def test_lob_only_invariance():
    # identities are never read: stripping or permuting agent ids changes nothing
    msgs, _ = crumble_scenario(agent=3)
    log, snaps = book_stream(msgs)
    a = detect(log, snaps, DetectorParams(), session=(0, 10 * NS_PER_S))
    for agent in (-1, 77):
        stripped = [replace(m, agent_id=agent) for m in log]
        b = detect(stripped, snaps, DetectorParams(), session=(0, 10 * NS_PER_S))
        assert [(e.side, e.t0, e.t1, e.flags, e.features) for e in a.events] == \
               [(e.side, e.t0, e.t1, e.flags, e.features) for e in b.events]


def test_binary_label_inclusive():
    p = DetectorParams()
    ev = CandidateEvent(Side.ASK, 0, 1, flags={f: True for f in ("book", "eff", "opp", "trans")})
    ev.features = {"WD": p.theta_wd, "DS": 5.0, "RR": 0.1, "SR": p.theta_sr, "EPD": -p.theta_epd, "ID": p.theta_id}
    assert binary_label(ev, p, theta_ds=5.0, theta_rr=0.1) == 1
    assert binary_label(ev, p, theta_ds=5.0 + 1e-9, theta_rr=0.1) == 0
    ev.flags["opp"] = False
    assert binary_label(ev, p, theta_ds=0.0, theta_rr=0.0) == 0


def gated_event(ds, rr, gate=True):
    ev = CandidateEvent(Side.BID, 0, 1, flags={f: gate for f in ("book", "eff", "opp", "trans")})
    ev.features = dict.fromkeys(FEATURES, 0.0) | {"DS": ds, "RR": rr}
    return ev


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 5), st.booleans()), min_size=20, max_size=80))
def test_percentile_thresholds_match_oracle(rows):
    p = DetectorParams(min_calibration_events=1)
    evs = [gated_event(ds, rr, g) for ds, rr, g in rows]
    passing = [(ds, rr) for ds, rr, g in rows if g]
    got = calibrate_percentile_thresholds(evs, p)
    if not passing:
        assert got == (p.theta_ds, p.theta_rr)
        return
    for k in range(2):
        ref = quantile_type7([r[k] for r in passing], p.calibration_percentile / 100)
        assert got[k] == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_calibration_falls_back_when_few_events():
    p = DetectorParams(min_calibration_events=20)
    assert calibrate_percentile_thresholds([gated_event(1.0, 1.0)] * 5, p) == (p.theta_ds, p.theta_rr)


def test_param_validation():
    with pytest.raises(ValueError):
        DetectorParams(gap_ms=0)
    with pytest.raises(ValueError):
        DetectorParams(eps_leak=1.5)
    with pytest.raises(ValueError):
        BookHistory([5, 4], [1, 1], [2, 2], [1, 1], [1, 1])
