from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crumble.ground_truth import (Interval, build_intervals, continuous_target, iou, match_events, match_side,
                                  merge_spans, regime_indicator)
from crumble.lob import Side
from oracles import greedy_match, intervals_scan, iou_cells, max_matching_size, merge_cells

span = st.tuples(st.integers(0, 60), st.integers(0, 30)).map(lambda p: (p[0], p[0] + p[1]))
pos_span = st.tuples(st.integers(0, 60), st.integers(1, 30)).map(lambda p: (p[0], p[0] + p[1]))


def test_iou_examples():
    assert iou((0, 10), (5, 15)) == Fraction(1, 3)
    assert iou((0, 10), (10, 20)) == 0
    assert iou((0, 10), (0, 10)) == 1
    assert iou((3, 3), (3, 3)) == 1
    assert iou((3, 3), (0, 10)) == 0
    with pytest.raises(ValueError):
        iou((5, 4), (0, 1))


@given(span, span)
def test_iou_matches_cell_count(a, b):
    assert iou(a, b) == iou_cells(a, b)
    assert iou(a, b) == iou(b, a)
    assert 0 <= iou(a, b) <= 1


@given(st.lists(pos_span, max_size=12), st.integers(1, 8))
def test_merge_matches_cell_timeline(spans, gap):
    assert merge_spans(spans, gap) == merge_cells(spans, gap)


def test_merge_gap_zero_keeps_touching_spans_apart():
    assert merge_spans([(0, 5), (5, 9)], 0) == [(0, 5), (5, 9)]
    assert merge_spans([(0, 5), (5, 9)], 1) == [(0, 9)]


def test_regime_indicator():
    assert regime_indicator(0.66, 0.15, Side.BID) == 1
    assert regime_indicator(0.65, 0.15, Side.BID) == 0
    assert regime_indicator(0.34, 0.15, Side.ASK) == 1
    assert regime_indicator(0.5, 0.15, Side.ASK) == 0
    with pytest.raises(ValueError):
        regime_indicator(0.5, 0.0, Side.BID)


def test_build_intervals_example():
    trace = [(0, 0.5), (100, 0.8), (300, 0.5), (350, 0.9), (500, 0.2), (600, 0.5)]
    out = build_intervals(trace, xi=0.15, gap_ns=100, end_ns=1000)
    assert [(i.start, i.end) for i in out[Side.BID]] == [(100, 500)]
    assert [(i.start, i.end) for i in out[Side.ASK]] == [(500, 600)]
    out = build_intervals(trace, xi=0.15, gap_ns=10, end_ns=1000)
    assert [(i.start, i.end) for i in out[Side.BID]] == [(100, 300), (350, 500)]


def test_build_intervals_errors():
    with pytest.raises(ValueError):
        build_intervals([])
    with pytest.raises(ValueError):
        build_intervals([(5, 0.5), (5, 0.9)])
    with pytest.raises(ValueError):
        Interval(Side.BID, 5, 4)


@settings(max_examples=150)
@given(st.lists(st.tuples(st.integers(1, 20), st.floats(0.1, 0.9)), min_size=1, max_size=40),
       st.integers(1, 30), st.sampled_from([0.05, 0.15, 0.3]))
def test_build_intervals_matches_scan(steps, gap, xi):
    t, trace = 0, []
    for dt, beta in steps:
        trace.append((t, beta))
        t += dt
    out = build_intervals(trace, xi=xi, gap_ns=gap, end_ns=t)
    ref = intervals_scan(trace, xi, gap, t)
    for side in (Side.BID, Side.ASK):
        assert [(i.start, i.end) for i in out[side]] == ref[side.value]


@settings(max_examples=150)
@given(st.lists(pos_span, max_size=8), st.lists(pos_span, max_size=8),
       st.sampled_from([Fraction(1, 10), Fraction(3, 10), Fraction(1, 2)]))
def test_greedy_matching_matches_oracle(pred, truth, theta):
    res = match_side(pred, truth, theta)
    got = {i: g for i, (g, _) in enumerate(res) if g is not None}
    assert got == greedy_match(pred, truth, theta)
    # greedy is at least half the maximum one-to-one matching, never above it
    best = max_matching_size(pred, truth, theta)
    assert best / 2 <= len(got) <= best


def test_match_events_counts():
    pred = {Side.BID: [(0, 10), (50, 60)], Side.ASK: [(0, 10)]}
    truth = {Side.BID: [Interval(Side.BID, 2, 10)], Side.ASK: [(100, 200)]}
    rep = match_events(pred, truth, 0.3)
    assert (rep.tp, rep.fp, rep.fn) == (1, 2, 1)
    assert rep.recall == 0.5 and rep.precision == pytest.approx(1 / 3)
    assert rep.targets(Side.BID) == [1, 0] and rep.targets(Side.ASK) == [0]
    assert rep.to_dict()["tp"] == 1


def test_match_threshold_boundary_inclusive():
    # iou exactly 3/10 is kept at theta 0.3
    rep = match_events({Side.BID: [(0, 3)]}, {Side.BID: [(0, 10)]}, 0.3)
    assert rep.tp == 1
    rep = match_events({Side.BID: [(0, 2)]}, {Side.BID: [(0, 10)]}, 0.3)
    assert rep.tp == 0


def test_continuous_target():
    assert continuous_target((0, 10), [(5, 15), (0, 8)]) == 0.8
    assert continuous_target((0, 10), []) == 0.0
