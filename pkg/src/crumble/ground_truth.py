"""Ground-truth crumble intervals from the market maker's regime trace, and IoU matching."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from .lob import Side

DEFAULT_XI = 0.15
DEFAULT_GAP_NS = 200_000_000


@dataclass(frozen=True)
class Interval:
    side: Side
    start: int
    end: int

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("interval end precedes start")


def regime_indicator(beta: float, xi: float, side: Side) -> int:
    """1 when the maker's skew puts ``side`` in crumble mode."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    if side is Side.BID:
        return int(beta > 0.5 + xi)
    return int(beta < 0.5 - xi)


def build_intervals(trace: Sequence[tuple[int, float]], xi: float = DEFAULT_XI,
                    gap_ns: int = DEFAULT_GAP_NS, end_ns: Optional[int] = None) -> dict:
    """Per-side ground-truth intervals from (timestamp, beta) records.

    Each record's beta holds until the next record; the last holds until
    ``end_ns`` (defaults to its own timestamp). Spans separated by less than
    ``gap_ns`` are merged.
    """
    if not trace:
        raise ValueError("empty regime trace")
    if gap_ns < 0:
        raise ValueError("gap must be non-negative")
    times = [int(t) for t, _ in trace]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("regime trace timestamps must be strictly increasing")
    final = times[-1] if end_ns is None else int(end_ns)
    out = {}
    for side in (Side.BID, Side.ASK):
        spans = []
        start = None
        for i, (t, beta) in enumerate(trace):
            z = regime_indicator(beta, xi, side)
            if z and start is None:
                start = int(t)
            elif not z and start is not None:
                spans.append((start, int(t)))
                start = None
        if start is not None:
            spans.append((start, final))
        spans = [s for s in spans if s[1] > s[0]]
        out[side] = [Interval(side, a, b) for a, b in merge_spans(spans, gap_ns)]
    return out


def merge_spans(spans, gap_ns: int) -> list[tuple[int, int]]:
    merged: list[list[int]] = []
    for a, b in sorted(spans):
        if merged and a - merged[-1][1] < gap_ns:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def iou(a: tuple[int, int], b: tuple[int, int]) -> Fraction:
    """Intersection over union of two closed intervals, as an exact fraction."""
    a0, a1 = a
    b0, b1 = b
    if a1 < a0 or b1 < b0:
        raise ValueError("invalid interval")
    union = max(a1, b1) - min(a0, b0)
    if union == 0:
        return Fraction(1) if (a0, a1) == (b0, b1) else Fraction(0)
    inter = max(0, min(a1, b1) - max(a0, b0))
    return Fraction(inter, union)


@dataclass
class MatchReport:
    theta: float
    # side -> list of (predicted index, ground-truth index or None, iou)
    pairs: dict = field(default_factory=dict)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def targets(self, side: Side) -> list[int]:
        """Binary supervision target y_e for each predicted event on ``side``."""
        return [int(g is not None) for _, g, _ in self.pairs.get(side, [])]

    @property
    def recall(self) -> Optional[float]:
        n = self.tp + self.fn
        return self.tp / n if n else None

    @property
    def precision(self) -> Optional[float]:
        n = self.tp + self.fp
        return self.tp / n if n else None

    def to_dict(self) -> dict:
        return {
            "theta_iou": self.theta, "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "recall": self.recall, "precision": self.precision,
            "pairs": {s.value: [[p, g, float(v)] for p, g, v in rows] for s, rows in self.pairs.items()},
        }


def _overlapping_pairs(pred, truth):
    """(iou, i, j) for every pair with positive overlap, via a sorted sweep."""
    order = sorted(range(len(truth)), key=lambda j: truth[j][0])
    starts = [truth[j][0] for j in order]
    out = []
    max_len = max((b - a for a, b in truth), default=0)
    for i, (a0, a1) in enumerate(pred):
        lo = bisect.bisect_left(starts, a0 - max_len)
        hi = bisect.bisect_right(starts, a1)
        for k in range(lo, hi):
            j = order[k]
            v = iou((a0, a1), truth[j])
            if v > 0:
                out.append((v, i, j))
    return out


def match_side(pred: Sequence[tuple[int, int]], truth: Sequence[tuple[int, int]], theta: float):
    """Greedy one-to-one matching by descending IoU, keeping pairs at or above theta.

    Returns a list aligned with ``pred`` of (ground-truth index or None, iou).
    """
    th = Fraction(theta).limit_denominator(10**9) if not isinstance(theta, Fraction) else theta
    cands = [c for c in _overlapping_pairs(pred, truth) if c[0] >= th]
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    got_p: dict = {}
    used_g = set()
    for v, i, j in cands:
        if i in got_p or j in used_g:
            continue
        got_p[i] = (j, v)
        used_g.add(j)
    return [got_p.get(i, (None, Fraction(0))) for i in range(len(pred))]


def match_events(predicted: dict, ground_truth: dict, theta: float = 0.3) -> MatchReport:
    """Match per-side predicted spans to ground-truth spans.

    Both arguments map side -> list of (start, end) or ``Interval``.
    """
    rep = MatchReport(theta=theta)
    for side in (Side.BID, Side.ASK):
        pred = [_span(e) for e in predicted.get(side, [])]
        truth = [_span(e) for e in ground_truth.get(side, [])]
        res = match_side(pred, truth, theta)
        rep.pairs[side] = [(i, g, v) for i, (g, v) in enumerate(res)]
        n_tp = sum(g is not None for g, _ in res)
        rep.tp += n_tp
        rep.fp += len(pred) - n_tp
        rep.fn += len(truth) - n_tp
    return rep


def _span(e) -> tuple[int, int]:
    if isinstance(e, Interval):
        return e.start, e.end
    return int(e[0]), int(e[1])


def continuous_target(span: tuple[int, int], truth: Sequence) -> float:
    """Largest IoU between ``span`` and any same-side ground-truth interval."""
    best = Fraction(0)
    for t in truth:
        best = max(best, iou(span, _span(t)))
    return float(best)
