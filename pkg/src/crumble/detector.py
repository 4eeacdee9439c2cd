"""LOB-only crumble detection: depletion-consistent steps, clustering, hard filters and features.

Inputs are the snapshot stream (quotes and touch depth after every update)
and the message log (for per-level add/cancel/execute volumes). Only the
observable fields of each message are read.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernel import NS_PER_MS, NS_PER_S
from .lob import FlowLedger, MarketMessage, Side

log = logging.getLogger(__name__)

FEATURES = ("WD", "DS", "RR", "SR", "EPD", "ID")
FILTERS = ("book", "eff", "opp", "trans")
EPS = 1e-9


@dataclass
class DetectorParams:
    dep_lookback_ms: float = 100.0
    eps_q: float = 0.05
    eps_leak: float = 0.10
    eps_add: float = 0.15
    gap_ms: float = 200.0
    max_duration_s: float = 2.0
    min_steps: int = 4
    h_pre_s: float = 1.0
    h_post_s: float = 1.0
    h_ref_s: float = 1.0
    h_rev_s: float = 3.0
    kappa_miss: float = 0.05
    kappa_repr: float = 0.20
    kappa_eff: float = 5.0
    kappa_eff_post: float = 8.0
    kappa_opp: float = 5.0
    kappa_rev: float = 0.6
    theta_wd: float = 2.0
    theta_sr: float = 1.0
    theta_epd: float = 6.0
    theta_id: float = 0.3
    theta_ds: float = 0.0  # replaced by percentile calibration when enough events exist
    theta_rr: float = 0.0
    calibration_percentile: float = 5.0
    min_calibration_events: int = 20
    ema_half_life_ms: float = 500.0
    eps: float = EPS

    def __post_init__(self):
        for name in ("dep_lookback_ms", "gap_ms", "max_duration_s", "h_pre_s", "h_post_s",
                     "h_ref_s", "h_rev_s", "ema_half_life_ms"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eps_leak", "eps_add", "kappa_miss", "kappa_rev"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.min_steps < 1:
            raise ValueError("min_steps must be at least 1")

    def ns(self, name: str) -> int:
        v = getattr(self, name)
        return int(round(v * NS_PER_MS)) if name.endswith("_ms") else int(round(v * NS_PER_S))


# -- book history ------------------------------------------------------------------

class BookHistory:
    """Quotes and touch depth after the last update at each distinct timestamp.

    ``before(t)`` indexes the state in force at t⁻, ``after(t)`` the state at t⁺.
    Empty sides are stored as -1.
    """

    def __init__(self, time, bid, ask, bid_depth1, ask_depth1):
        time = np.asarray(time, dtype=np.int64)
        if len(time) == 0:
            raise ValueError("empty snapshot stream")
        if np.any(np.diff(time) < 0):
            raise ValueError("snapshot timestamps must be non-decreasing")
        last = np.r_[time[1:] != time[:-1], True]
        self.time = time[last]
        self.bid = np.asarray(bid, dtype=np.int64)[last]
        self.ask = np.asarray(ask, dtype=np.int64)[last]
        self.d1b = np.asarray(bid_depth1, dtype=np.int64)[last]
        self.d1a = np.asarray(ask_depth1, dtype=np.int64)[last]

    @classmethod
    def from_snapshots(cls, snaps) -> "BookHistory":
        return cls(snaps.time, snaps.bid, snaps.ask, snaps.bid_depth1, snaps.ask_depth1)

    def __len__(self):
        return len(self.time)

    def quote(self, side: Side) -> np.ndarray:
        return self.bid if side is Side.BID else self.ask

    def before(self, t: int) -> int:
        return int(np.searchsorted(self.time, t, side="left")) - 1

    def after(self, t: int) -> int:
        return int(np.searchsorted(self.time, t, side="right")) - 1

    def two_sided(self) -> np.ndarray:
        return (self.bid >= 0) & (self.ask >= 0)

    def window(self, lo: int, hi: int, lo_open: bool, hi_open: bool) -> np.ndarray:
        """Indices of states in force somewhere in the window between lo and hi.

        The state in force at the left edge is included, followed by every
        update strictly inside (or at a closed right edge of) the window.
        """
        first = self.after(lo) if lo_open else self.before(lo)
        last = self.before(hi) if hi_open else self.after(hi)
        first = max(first, 0)
        if last < first:
            return np.arange(0)
        return np.arange(first, last + 1)


# -- steps -----------------------------------------------------------------------

@dataclass
class DeteriorationStep:
    time: int
    side: Side
    pre: int
    post: int
    ticks: int
    q_pre: int
    q_post: int
    added: int
    canceled: int
    executed: int


def depletion_ok(q_pre: int, q_post: int, a: int, c: int, e: int, params: DetectorParams) -> bool:
    """The three visible-depletion inequalities at the old best."""
    return (q_post <= params.eps_q * q_pre
            and c + e >= (1 - params.eps_leak) * q_pre
            and a <= params.eps_add * q_pre)


def detect_steps(history: BookHistory, ledger: FlowLedger, params: DetectorParams) -> dict:
    """Per-side depletion-consistent deterioration steps, in time order."""
    lookback = params.ns("dep_lookback_ms")
    out = {}
    for side in (Side.BID, Side.ASK):
        q = history.quote(side)
        sgn = side.sign
        pre, post = q[:-1], q[1:]
        defined = (pre >= 0) & (post >= 0)
        moved = defined & (sgn * (post - pre) >= 1)
        undefined = int(np.count_nonzero((pre >= 0) != (post >= 0)))
        if undefined:
            log.debug("%s side emptied or refilled %d times; no step evaluated", side.value, undefined)
        steps = []
        for k in np.flatnonzero(moved) + 1:
            t = int(history.time[k])
            pi = int(q[k - 1])
            q_pre = ledger.depth_before(side, pi, t)
            q_post = ledger.depth(side, pi, t)
            a, c, e = ledger.volumes(side, pi, t - lookback, t)
            if depletion_ok(q_pre, q_post, a, c, e, params):
                steps.append(DeteriorationStep(t, side, pi, int(q[k]), int(sgn * (q[k] - pi)),
                                               q_pre, q_post, a, c, e))
        out[side] = steps
    return out


# -- clustering -------------------------------------------------------------------

@dataclass
class CandidateEvent:
    side: Side
    t0: int
    t1: int
    steps: list = field(default_factory=list)
    levels: tuple = ()
    flags: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    rho: float = float("nan")
    boundary: bool = False
    missing: bool = False
    label: int = 0
    target: float = 0.0

    @property
    def gate(self) -> int:
        return int(not self.boundary and all(self.flags.get(f, False) for f in FILTERS))

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def vector(self) -> np.ndarray:
        return np.array([self.features.get(f, np.nan) for f in FEATURES], dtype=np.float64)


def cluster_steps(steps: Sequence[DeteriorationStep], params: DetectorParams) -> list[CandidateEvent]:
    """Runs of steps with gaps at most g, split at D_max, keeping runs of n_step or more."""
    gap = params.ns("gap_ms")
    dmax = params.ns("max_duration_s")
    runs: list[list[DeteriorationStep]] = []
    for s in steps:
        if runs and s.time - runs[-1][-1].time <= gap and s.time - runs[-1][0].time <= dmax:
            runs[-1].append(s)
        else:
            runs.append([s])
    return [CandidateEvent(r[0].side, r[0].time, r[-1].time, list(r))
            for r in runs if len(r) >= params.min_steps]


# -- efficient price ----------------------------------------------------------------

class EfficientPrice:
    """Exponentially smoothed microprice, continuous in time.

    The microprice is piecewise constant between updates; the EMA integrates
    it exactly with the given half-life. Values are kept relative to the
    first observed midprice so that reflecting the book negates them exactly.
    One-sided instants carry the last microprice forward (counted in
    ``one_sided``).
    """

    def __init__(self, history: BookHistory, half_life_ms: float = 500.0):
        self.history = history
        self.half_life = half_life_ms * NS_PER_MS
        ok = history.two_sided()
        self.one_sided = int(np.count_nonzero(~ok))
        if not ok.any():
            raise ValueError("book never two-sided; microprice undefined")
        b = history.bid.astype(np.float64)
        a = history.ask.astype(np.float64)
        db = history.d1b.astype(np.float64)
        da = history.d1a.astype(np.float64)
        first = int(np.flatnonzero(ok)[0])
        self.origin = (a[first] + b[first]) / 2
        with np.errstate(invalid="ignore", divide="ignore"):
            micro = ((a + b) / 2 - self.origin) + (a - b) * (db - da) / (2 * (da + db))
        micro[~ok] = np.nan
        # carry the last defined value forward; leading gaps take the first value
        idx = np.where(ok, np.arange(len(micro)), -1)
        np.maximum.accumulate(idx, out=idx)
        idx[idx < 0] = first
        self.micro = micro[idx]
        t = history.time.astype(np.float64)
        self.ema = np.empty_like(self.micro)
        self.ema[0] = self.micro[0]
        for k in range(1, len(t)):
            w = 2.0 ** (-(t[k] - t[k - 1]) / self.half_life)
            self.ema[k] = self.micro[k - 1] * (1.0 - w) + self.ema[k - 1] * w

    def at(self, t: int) -> float:
        """Smoothed value at time ``t`` relative to ``origin`` (continuous, so t⁻ = t⁺)."""
        k = self.history.before(t)
        if k < 0:
            return float(self.ema[0])
        w = 2.0 ** (-(t - float(self.history.time[k])) / self.half_life)
        return float(self.micro[k] * (1.0 - w) + self.ema[k] * w)

    def microprice(self) -> np.ndarray:
        return self.micro + self.origin


def microprice(bid: int, ask: int, bid_depth: int, ask_depth: int) -> float:
    return (ask * bid_depth + bid * ask_depth) / (ask_depth + bid_depth)


# -- filters and features --------------------------------------------------------------

def traversed_levels(event: CandidateEvent) -> tuple:
    """Levels the best quote walked through: each step's range, minus the final resting best."""
    side = event.side
    final = event.steps[-1].post
    levels = set()
    for s in event.steps:
        for k in range(s.ticks):
            levels.add(s.pre + side.sign * k)
    levels.discard(final)
    return tuple(sorted(levels))


def _mids(history: BookHistory, idx: np.ndarray) -> np.ndarray:
    idx = idx[(history.bid[idx] >= 0) & (history.ask[idx] >= 0)]
    return (history.bid[idx] + history.ask[idx]) / 2.0


def _spreads(history: BookHistory, idx: np.ndarray) -> np.ndarray:
    idx = idx[(history.bid[idx] >= 0) & (history.ask[idx] >= 0)]
    return (history.ask[idx] - history.bid[idx]).astype(np.float64)


def evaluate_event(event: CandidateEvent, history: BookHistory, ledger: FlowLedger, eff: EfficientPrice,
                   params: DetectorParams, session: tuple[int, int]) -> CandidateEvent:
    """Fill in hard-filter verdicts, the reversion ratio and the six features."""
    side, t0, t1 = event.side, event.t0, event.t1
    h_pre, h_post = params.ns("h_pre_s"), params.ns("h_post_s")
    h_ref, h_rev = params.ns("h_ref_s"), params.ns("h_rev_s")
    event.boundary = t0 - h_pre < session[0] or t1 + max(h_post, h_rev, h_ref) > session[1]
    levels = traversed_levels(event)
    event.levels = levels
    # flows over [t0, t1] inclusive of the first step
    v_rm = v_add = v0 = v_ref = 0
    for p in levels:
        a, c, e = ledger.volumes(side, p, t0 - 1, t1)
        v_rm += c + e
        v_add += a
        v0 += ledger.depth_before(side, p, t0)
        v_ref += ledger.volumes(side, p, t1, t1 + h_ref)[0]
    book_ok = v_rm >= (1 - params.kappa_miss) * v0 and v_add / (v_rm + params.eps) <= params.kappa_repr

    eff_during = eff.at(t1) - eff.at(t0)
    epd = eff.at(t1 + h_post) - eff.at(t0 - h_pre)
    eff_ok = abs(eff_during) <= params.kappa_eff and abs(epd) <= params.kappa_eff_post

    opp = history.quote(side.opposite)
    i_pre, i_post = history.before(t0), history.after(t1)
    o_pre = int(opp[i_pre]) if i_pre >= 0 else -1
    o_post = int(opp[i_post])
    opp_ok = o_pre >= 0 and o_post >= 0 and abs(o_post - o_pre) <= params.kappa_opp

    own = history.quote(side)
    s_pre = int(own[i_pre]) if i_pre >= 0 else -1
    s_post = int(own[i_post])

    pre_idx = history.window(t0 - h_pre, t0, lo_open=False, hi_open=True)
    during_idx = history.window(t0, t1, lo_open=False, hi_open=False)
    during_idx = during_idx[history.time[during_idx] >= t0]
    post_idx = history.window(t1, t1 + h_rev, lo_open=True, hi_open=False)
    m_pre_s, m_dur, m_post_s = _mids(history, pre_idx), _mids(history, during_idx), _mids(history, post_idx)
    spr_pre_s = _spreads(history, pre_idx)
    smax_idx = history.window(t0, t1 + h_post, lo_open=False, hi_open=False)
    smax_idx = smax_idx[history.time[smax_idx] >= t0]
    spr_evt = _spreads(history, smax_idx)

    missing = (s_pre < 0 or s_post < 0 or len(m_pre_s) == 0 or len(m_dur) == 0 or len(m_post_s) == 0
               or len(spr_pre_s) == 0 or len(spr_evt) == 0)
    if missing:
        event.missing = True
        rho = float("nan")
        trans_ok = False
        wd = sr = idv = float("nan")
    else:
        m_pre = float(np.median(m_pre_s))
        m_post = float(np.median(m_post_s))
        m_ext = float(m_dur.max() if side is Side.ASK else m_dur.min())
        rho = abs(m_post - m_pre) / (abs(m_ext - m_pre) + params.eps)
        trans_ok = rho <= params.kappa_rev
        wd = float(side.sign * (s_post - s_pre))
        sr = float(spr_evt.max() - np.median(spr_pre_s))
        idv = 1.0 - rho
    event.rho = rho
    event.flags = {"book": bool(book_ok), "eff": bool(eff_ok), "opp": bool(opp_ok), "trans": bool(trans_ok)}
    event.features = {
        "WD": wd,
        "DS": v_rm / ((t1 - t0) / NS_PER_S + params.eps),
        "RR": v_ref / (v_rm + params.eps),
        "SR": sr,
        "EPD": float(epd),
        "ID": idv,
    }
    return event


def hard_filters(event: CandidateEvent, params: DetectorParams) -> bool:
    """Gate 𝓕(e) from precomputed verdicts: all four filters pass and windows are complete."""
    return bool(event.gate)


def calibrate_percentile_thresholds(events: Sequence[CandidateEvent], params: DetectorParams) -> tuple:
    """(theta_DS, theta_RR) at the configured percentile over filter-passing events."""
    passing = [e for e in events if e.gate and not e.missing]
    if len(passing) < params.min_calibration_events:
        log.warning("only %d filter-passing events; using default DS/RR thresholds", len(passing))
        return params.theta_ds, params.theta_rr
    q = params.calibration_percentile
    ds = np.percentile([e.features["DS"] for e in passing], q)
    rr = np.percentile([e.features["RR"] for e in passing], q)
    return float(ds), float(rr)


def binary_label(event: CandidateEvent, params: DetectorParams, theta_ds: Optional[float] = None,
                 theta_rr: Optional[float] = None) -> int:
    """Gated severity rule; thresholds are inclusive."""
    if not event.gate or event.missing:
        return 0
    f = event.features
    t_ds = params.theta_ds if theta_ds is None else theta_ds
    t_rr = params.theta_rr if theta_rr is None else theta_rr
    return int(f["WD"] >= params.theta_wd and f["DS"] >= t_ds and f["RR"] >= t_rr
               and f["SR"] >= params.theta_sr and f["ID"] >= params.theta_id
               and abs(f["EPD"]) <= params.theta_epd)


# -- pipeline -------------------------------------------------------------------------

@dataclass
class Detection:
    steps: dict
    events: list
    history: BookHistory
    eff: EfficientPrice
    dropped_boundary: int = 0

    def spans(self, side: Side) -> list[tuple[int, int]]:
        return [(e.t0, e.t1) for e in self.events if e.side is side]


def detect(messages: Sequence[MarketMessage], snapshots, params: Optional[DetectorParams] = None,
           session: Optional[tuple[int, int]] = None, ledger: Optional[FlowLedger] = None) -> Detection:
    """Full detector pass. Boundary events are dropped (counted in ``dropped_boundary``)."""
    params = params or DetectorParams()
    history = BookHistory.from_snapshots(snapshots) if not isinstance(snapshots, BookHistory) else snapshots
    ledger = ledger or FlowLedger.from_messages(messages)
    if session is None:
        session = (int(history.time[0]), int(history.time[-1]))
    steps = detect_steps(history, ledger, params)
    eff = EfficientPrice(history, params.ema_half_life_ms)
    events = []
    dropped = 0
    for side in (Side.BID, Side.ASK):
        for ev in cluster_steps(steps[side], params):
            evaluate_event(ev, history, ledger, eff, params, session)
            if ev.boundary:
                dropped += 1
                continue
            events.append(ev)
    events.sort(key=lambda e: (e.t1, e.t0, e.side.value))
    return Detection(steps, events, history, eff, dropped)


def params_dict(params: DetectorParams) -> dict:
    return asdict(params)
