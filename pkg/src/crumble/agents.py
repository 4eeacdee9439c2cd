"""Background traders, the regime-switching market maker and its regime drivers."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .kernel import (EXCHANGE_ID, NS_PER_MS, NS_PER_S, FundamentalProcess, Kernel, MarketView,
                     Query, SimClock)
from .lob import Kind, MarketMessage, Side

NEUTRAL_BETA = 0.5


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# -- configuration -------------------------------------------------------------

@dataclass
class NoiseAgentCfg:
    count: int = 150
    orders_per_hour: float = 1200.0  # per agent, averaged over the session
    size_min: int = 10
    size_max: int = 100


@dataclass
class ValueAgentCfg:
    count: int = 100
    wake_rate: float = 0.1  # per second, per agent
    noise: float = 10.0  # valuation noise std, ticks
    size: int = 50
    empty_side_offset: int = 5

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("valuation noise must be non-negative")


@dataclass
class MomentumAgentCfg:
    count: int = 5
    short_window: int = 20
    long_window: int = 50
    wake_interval_s: float = 1.0
    size: int = 50

    def __post_init__(self):
        if not self.short_window < self.long_window:
            raise ValueError("short window must be shorter than long window")


@dataclass
class VolatilityAgentCfg:
    count: int = 0
    wake_rate: float = 0.05  # per second at midday, per agent
    size_multiplier: int = 3
    bias_probability: float = 0.7
    bias_trades: int = 10
    market_probability: float = 0.5
    size_min: int = 10
    size_max: int = 100


@dataclass
class HawkesCfg:
    baseline: float = 0.03
    excitation: float = 0.20
    decay: float = 0.08
    max_intensity: float = 1.0
    # "reset": clear the excitation history when the cap is reached; "clamp": only clip
    saturation: str = "reset"

    def __post_init__(self):
        if self.baseline <= 0 or self.excitation < 0 or self.decay <= 0:
            raise ValueError("invalid Hawkes parameters")
        if self.max_intensity < self.baseline:
            raise ValueError("max_intensity must be at least the baseline")
        if self.saturation not in ("reset", "clamp"):
            raise ValueError(f"unknown saturation rule {self.saturation!r}")


@dataclass
class MarketMakerCfg:
    levels: int = 10
    participation: float = 0.025
    wake_interval_ms: float = 100.0
    beta_min: float = 0.1
    beta_max: float = 0.9
    switch_prob: float = 0.05
    hold_s: float = 1.0
    driver: str = "bernoulli"
    volume_window_s: float = 100.0
    # |beta - 0.5| beyond which the thin side is withdrawn rather than maintained
    crumble_threshold: float = 0.15
    # a level within this fraction of its target size is left alone
    resize_tolerance: float = 0.25
    prior_volume: int = 100_000  # trailing-window volume assumed before the first trade
    warmup_s: float = 10.0  # shortest elapsed time used to extrapolate the window volume

    def __post_init__(self):
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        if not 0 <= self.switch_prob <= 1:
            raise ValueError("switch probability must lie in [0, 1]")
        if not 0 < self.participation < 1:
            raise ValueError("participation rate must lie in (0, 1)")
        if self.driver not in ("bernoulli", "hawkes"):
            raise ValueError(f"unknown regime driver {self.driver!r}")


# -- pure decision rules ---------------------------------------------------------

def arrival_times(n: int, rng, clock: SimClock) -> list[int]:
    """U-shaped intraday arrivals: Beta(1/2, 1/2) scaled to the session."""
    span = clock.span_ns
    return sorted(clock.open_ns + int(rng.betavariate(0.5, 0.5) * span) for _ in range(n))


def noise_agent_step(cfg: NoiseAgentCfg, rng, t: int, order_id: int, agent_id: int = -1):
    side = Side.BID if rng.random() < 0.5 else Side.ASK
    size = rng.randint(cfg.size_min, cfg.size_max)
    return [MarketMessage(t, Kind.MARKET, side, size, order_id, None, agent_id)]


def value_agent_step(cfg: ValueAgentCfg, valuation: int, bid: Optional[int], ask: Optional[int],
                     rng, t: int, order_id: int, agent_id: int = -1):
    """Buy below and sell above the valuation; cross when the quote is through it."""
    size = cfg.size
    off = cfg.empty_side_offset
    if bid is None and ask is None:
        if rng.random() < 0.5:
            return [MarketMessage(t, Kind.LIMIT_ADD, Side.BID, size, order_id, valuation - off, agent_id)]
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.ASK, size, order_id, valuation + off, agent_id)]
    if ask is None:
        if valuation < bid:
            return [MarketMessage(t, Kind.LIMIT_ADD, Side.ASK, size, order_id, valuation, agent_id)]
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.ASK, size, order_id, max(valuation + off, bid + 1), agent_id)]
    if bid is None:
        if valuation > ask:
            return [MarketMessage(t, Kind.LIMIT_ADD, Side.BID, size, order_id, valuation, agent_id)]
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.BID, size, order_id, min(valuation - off, ask - 1), agent_id)]
    if valuation > ask:
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.BID, size, order_id, valuation, agent_id)]
    if valuation < bid:
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.ASK, size, order_id, valuation, agent_id)]
    if 2 * valuation >= bid + ask:
        return [MarketMessage(t, Kind.LIMIT_ADD, Side.BID, size, order_id, min(valuation, ask - 1), agent_id)]
    return [MarketMessage(t, Kind.LIMIT_ADD, Side.ASK, size, order_id, max(valuation, bid + 1), agent_id)]


def moving_average_signal(history, short: int, long: int) -> int:
    """+1 buy, -1 sell, 0 no order (equal averages or not enough history)."""
    if len(history) < long:
        return 0
    h = list(history)[-long:]
    s = sum(h[-short:]) * long
    l_ = sum(h) * short
    # compare short/long means without division
    return (s > l_) - (s < l_)


def momentum_agent_step(cfg: MomentumAgentCfg, history, t: int, order_id: int, agent_id: int = -1):
    sig = moving_average_signal(history, cfg.short_window, cfg.long_window)
    if sig == 0:
        return []
    side = Side.BID if sig > 0 else Side.ASK
    return [MarketMessage(t, Kind.MARKET, side, cfg.size, order_id, None, agent_id)]


def volatility_intensity(t: int, clock: SimClock) -> float:
    """Intensity multiplier: 1 at midday rising linearly to 3 at the open and close."""
    half = clock.span_ns / 2
    mid = clock.open_ns + half
    return 1.0 + 2.0 * abs(t - mid) / half


def split_skew(total: int, beta: float) -> tuple[int, int]:
    """(ask, bid) quantities; the ask gets round(beta * total) and the bid the rest."""
    ask = round_half_up(beta * total)
    return ask, total - ask


def spread_levels(quantity: int, levels: int) -> list[int]:
    """Uniform split across levels, innermost first; the remainder goes to the innermost."""
    per, rem = divmod(quantity, levels)
    return [per + 1 if i < rem else per for i in range(levels)]


def crumble_side(cfg: MarketMakerCfg, beta: float) -> Optional[Side]:
    """Side the maker is withdrawing from, or None when quoting normally."""
    if beta > NEUTRAL_BETA + cfg.crumble_threshold:
        return Side.BID
    if beta < NEUTRAL_BETA - cfg.crumble_threshold:
        return Side.ASK
    return None


def quote_targets(cfg: MarketMakerCfg, view: MarketView, beta: float, volume: float,
                  ref: Optional[float]) -> dict:
    """Target own depth per (side, price) for a requote.

    Inner quotes sit at the touch, pulled in to ``ref`` +/- half a tick when the
    book is wider than that. In crumble mode the withdrawn side follows the
    touch wherever the flow pushes it, while the other side stays at the
    reference instead of joining quotes inside the widened spread.
    """
    total = max(1, round_half_up(cfg.participation * volume))
    q_ask, q_bid = split_skew(total, beta)
    bid, ask = view.bid, view.ask
    if ref is None:
        ref = view.mid
    thin = crumble_side(cfg, beta)
    bid_star = None if ref is None else math.floor(ref - 0.5)
    ask_star = None if ref is None else math.ceil(ref + 0.5)

    def anchor(best, star, better):
        if best is None:
            return star
        if star is None:
            return best
        return better(best, star)

    if thin is None:
        bid_anchor = anchor(bid, bid_star, max)
        ask_anchor = anchor(ask, ask_star, min)
    else:
        # the withdrawn side follows the touch; the other side holds the reference
        bid_anchor = bid if thin is Side.BID and bid is not None else (bid_star if bid_star is not None else bid)
        ask_anchor = ask if thin is Side.ASK and ask is not None else (ask_star if ask_star is not None else ask)
    if bid_anchor is not None and ask is not None:
        bid_anchor = min(bid_anchor, ask - 1)
    if ask_anchor is not None and bid is not None:
        ask_anchor = max(ask_anchor, bid + 1)
    if bid_anchor is not None and ask_anchor is not None and bid_anchor >= ask_anchor:
        if thin is Side.BID:
            ask_anchor = bid_anchor + 1
        else:
            bid_anchor = ask_anchor - 1
    targets = {}
    L = cfg.levels
    if bid_anchor is not None:
        for i, q in enumerate(spread_levels(q_bid, L)):
            if q:
                targets[(Side.BID, bid_anchor - i)] = q
    if ask_anchor is not None:
        for i, q in enumerate(spread_levels(q_ask, L)):
            if q:
                targets[(Side.ASK, ask_anchor + i)] = q
    return targets


def mm_quote_update(cfg: MarketMakerCfg, view: MarketView, beta: float, volume: float,
                    next_id: Callable[[], int], ref: Optional[float] = None,
                    agent_id: int = -1) -> list[MarketMessage]:
    """Cancels and adds that bring the maker's resting depth to its skewed ladder.

    Levels already at target are left alone so queue position is kept; a level
    above target loses its newest orders first and is topped back up. On a
    withdrawn side the maker only shrinks existing levels: consumed depth is
    not replenished and no new levels are opened.
    """
    targets = quote_targets(cfg, view, beta, volume, ref)
    thin = crumble_side(cfg, beta)
    own: dict = {}
    for oid, (side, price, qty) in sorted((view.orders or {}).items()):
        own.setdefault((side, price), []).append((oid, qty))
    t = view.time
    out = []
    for key in sorted(own, key=lambda k: (k[0].value, k[1])):
        if key not in targets:
            for oid, qty in own[key]:
                out.append(MarketMessage(t, Kind.CANCEL, key[0], qty, oid, key[1], agent_id))
    for key in sorted(targets, key=lambda k: (k[0].value, k[1])):
        side, price = key
        want = targets[key]
        mine = own.get(key, [])
        have = sum(q for _, q in mine)
        if have and abs(have - want) <= cfg.resize_tolerance * want:
            continue
        reduced = False
        while have > want and mine:
            oid, qty = mine.pop()
            out.append(MarketMessage(t, Kind.CANCEL, side, qty, oid, price, agent_id))
            have -= qty
            reduced = True
        if have >= want:
            continue
        if side is thin and not reduced:
            continue
        out.append(MarketMessage(t, Kind.LIMIT_ADD, side, want - have, next_id(), price, agent_id))
    return out


# -- regime drivers ------------------------------------------------------------

def draw_skew(cfg: MarketMakerCfg, rng) -> float:
    return rng.uniform(cfg.beta_min, cfg.beta_max)


def regime_step_bernoulli(cfg: MarketMakerCfg, rng, t: int, beta: float, hold_until: int):
    """One wake-up of the memoryless driver. Returns (beta, hold_until)."""
    if t < hold_until:
        return beta, hold_until
    if rng.random() < cfg.switch_prob:
        return draw_skew(cfg, rng), t + int(cfg.hold_s * NS_PER_S)
    return NEUTRAL_BETA, hold_until


class HawkesIntensity:
    """Exponential-kernel intensity baseline + sum_i excitation * exp(-decay (t - t_i)).

    The kernel sum is carried recursively, O(1) per update. Times are seconds.
    Query ``intensity(t)`` before adding an event at ``t`` (the sum is over
    strictly earlier events).
    """

    def __init__(self, baseline: float, excitation: float, decay: float):
        self.baseline = baseline
        self.excitation = excitation
        self.decay = decay
        self._s = 0.0
        self._t: Optional[float] = None
        self.events: list[float] = []

    def excitation_at(self, t: float) -> float:
        if self._t is None:
            return 0.0
        if t < self._t:
            raise ValueError("intensity queried before the last event")
        return self._s * math.exp(-self.decay * (t - self._t))

    def intensity(self, t: float) -> float:
        return self.baseline + self.excitation_at(t)

    def add_event(self, t: float):
        self._s = self.excitation_at(t) + self.excitation
        self._t = t
        self.events.append(t)

    def reset(self, t: float):
        self._s = 0.0
        self._t = t


def hawkes_direct_sum(baseline: float, excitation: float, decay: float, events, t: float) -> float:
    return baseline + sum(excitation * math.exp(-decay * (t - ti)) for ti in events if ti < t)


def regime_step_hawkes(cfg: MarketMakerCfg, hcfg: HawkesCfg, process: HawkesIntensity, rng,
                       t: int, beta: float, hold_until: int):
    """One wake-up of the self-exciting driver. Returns (beta, hold_until)."""
    if t < hold_until:
        return beta, hold_until
    ts = t / NS_PER_S
    lam = process.intensity(ts)
    if lam >= hcfg.max_intensity:
        if hcfg.saturation == "reset":
            process.reset(ts)
            lam = process.intensity(ts)
        else:
            lam = hcfg.max_intensity
    p = min(1.0, lam * cfg.wake_interval_ms / 1000.0)
    if rng.random() < p:
        process.add_event(ts)
        return draw_skew(cfg, rng), t + int(cfg.hold_s * NS_PER_S)
    return NEUTRAL_BETA, hold_until


# -- agents --------------------------------------------------------------------

@dataclass(slots=True)
class RegimeRecord:
    timestamp: int
    beta: float
    driver: str
    switch: bool


class Agent:
    agent_class = "background"

    def __init__(self, agent_id: int, latency: int):
        self.agent_id = agent_id
        self.latency = latency
        self.rng = None
        self.kernel: Optional[Kernel] = None

    def start(self, kernel: Kernel):
        self.kernel = kernel

    def wakeup(self, t: int):  # pragma: no cover - abstract
        pass

    def receive(self, t: int, payload):  # pragma: no cover - abstract
        pass

    def submit(self, msgs):
        k = self.kernel
        for m in msgs:
            k.submit(self.agent_id, m)

    def query(self, **kw):
        self.kernel.send(self.agent_id, EXCHANGE_ID, Query(self.agent_id, **kw))


class NoiseAgent(Agent):
    def __init__(self, agent_id, latency, cfg: NoiseAgentCfg):
        super().__init__(agent_id, latency)
        self.cfg = cfg
        self._arrivals: list[int] = []

    def start(self, kernel):
        super().start(kernel)
        n = round_half_up(self.cfg.orders_per_hour * kernel.clock.hours_elapsed(kernel.clock.close_ns))
        self._arrivals = arrival_times(n, self.rng, kernel.clock)[::-1]
        self._next()

    def _next(self):
        if self._arrivals:
            self.kernel.schedule(self._arrivals.pop(), self.agent_id)

    def wakeup(self, t):
        self.submit(noise_agent_step(self.cfg, self.rng, t, self.kernel.next_order_id(), self.agent_id))
        self._next()


class ValueAgent(Agent):
    def __init__(self, agent_id, latency, cfg: ValueAgentCfg, fundamental: FundamentalProcess):
        super().__init__(agent_id, latency)
        self.cfg = cfg
        self.fundamental = fundamental
        self._resting: Optional[int] = None

    def _schedule(self, t):
        dt = int(self.rng.expovariate(self.cfg.wake_rate) * NS_PER_S) + 1
        if t + dt <= self.kernel.clock.close_ns:
            self.kernel.schedule(t + dt, self.agent_id)

    def start(self, kernel):
        super().start(kernel)
        self._schedule(kernel.clock.open_ns)

    def wakeup(self, t):
        self.query(with_orders=True)
        self._schedule(t)

    def receive(self, t, view: MarketView):
        if self._resting is not None and view.orders and self._resting in view.orders:
            side, price, qty = view.orders[self._resting]
            self.submit([MarketMessage(t, Kind.CANCEL, side, qty, self._resting, price, self.agent_id)])
        self._resting = None
        valuation = int(round(self.fundamental.value(t) + self.rng.gauss(0.0, self.cfg.noise)))
        msgs = value_agent_step(self.cfg, valuation, view.bid, view.ask, self.rng, t,
                                self.kernel.next_order_id(), self.agent_id)
        for m in msgs:
            self._resting = m.order_id
        self.submit(msgs)


class MomentumAgent(Agent):
    def __init__(self, agent_id, latency, cfg: MomentumAgentCfg):
        super().__init__(agent_id, latency)
        self.cfg = cfg
        self.history = deque(maxlen=cfg.long_window)
        self._interval = int(cfg.wake_interval_s * NS_PER_S)

    def start(self, kernel):
        super().start(kernel)
        kernel.schedule(kernel.clock.open_ns + self.rng.randrange(self._interval), self.agent_id)

    def wakeup(self, t):
        self.query()
        if t + self._interval <= self.kernel.clock.close_ns:
            self.kernel.schedule(t + self._interval, self.agent_id)

    def receive(self, t, view: MarketView):
        if view.mid is None:
            return
        self.history.append(view.mid)
        self.submit(momentum_agent_step(self.cfg, self.history, t, self.kernel.next_order_id(), self.agent_id))


class VolatilityAgent(Agent):
    def __init__(self, agent_id, latency, cfg: VolatilityAgentCfg):
        super().__init__(agent_id, latency)
        self.cfg = cfg

    def _schedule(self, t):
        # thinning against the maximal multiplier 3
        k = self.kernel
        peak = 3.0 * self.cfg.wake_rate
        while True:
            t += int(self.rng.expovariate(peak) * NS_PER_S) + 1
            if t > k.clock.close_ns:
                return
            if self.rng.random() * 3.0 <= volatility_intensity(t, k.clock):
                k.schedule(t, self.agent_id)
                return

    def start(self, kernel):
        super().start(kernel)
        self._schedule(kernel.clock.open_ns)

    def wakeup(self, t):
        self.query(n_trades=self.cfg.bias_trades)
        self._schedule(t)

    def receive(self, t, view: MarketView):
        cfg, rng = self.cfg, self.rng
        trades = view.trades
        ret = trades[-1] - trades[0] if len(trades) >= 2 else 0
        trend = 1 if ret > 0 else -1 if ret < 0 else (1 if rng.random() < 0.5 else -1)
        direction = trend if rng.random() < cfg.bias_probability else -trend
        side = Side.BID if direction > 0 else Side.ASK
        size = rng.randint(cfg.size_min, cfg.size_max) * cfg.size_multiplier
        oid = self.kernel.next_order_id()
        if rng.random() < cfg.market_probability:
            self.submit([MarketMessage(t, Kind.MARKET, side, size, oid, None, self.agent_id)])
            return
        price = view.bid if side is Side.BID else view.ask
        if price is not None:
            self.submit([MarketMessage(t, Kind.LIMIT_ADD, side, size, oid, price, self.agent_id)])


class MarketMaker(Agent):
    agent_class = "market_maker"

    def __init__(self, agent_id, latency, cfg: MarketMakerCfg, hawkes: Optional[HawkesCfg] = None,
                 initial_mid: Optional[float] = None):
        super().__init__(agent_id, latency)
        self.cfg = cfg
        self.hawkes_cfg = hawkes or HawkesCfg()
        self.process = HawkesIntensity(self.hawkes_cfg.baseline, self.hawkes_cfg.excitation,
                                       self.hawkes_cfg.decay)
        self.beta = NEUTRAL_BETA
        self.hold_until = -1
        self.ref = initial_mid
        self._neutral = True
        self.regime_trace: list[RegimeRecord] = []
        self._interval = int(cfg.wake_interval_ms * NS_PER_MS)
        self._window = int(cfg.volume_window_s * NS_PER_S)
        self._warmup = min(self._window, int(cfg.warmup_s * NS_PER_S))

    def start(self, kernel):
        super().start(kernel)
        kernel.schedule(kernel.clock.open_ns, self.agent_id)

    def wakeup(self, t):
        old_hold = self.hold_until
        if self.cfg.driver == "bernoulli":
            self.beta, self.hold_until = regime_step_bernoulli(self.cfg, self.rng, t, self.beta, self.hold_until)
        else:
            self.beta, self.hold_until = regime_step_hawkes(self.cfg, self.hawkes_cfg, self.process, self.rng,
                                                            t, self.beta, self.hold_until)
        self.regime_trace.append(RegimeRecord(t, self.beta, self.cfg.driver, self.hold_until != old_hold))
        self.query(with_orders=True, volume_window_ns=self._window)
        if t + self._interval <= self.kernel.clock.close_ns:
            self.kernel.schedule(t + self._interval, self.agent_id)

    def volume_estimate(self, t: int, observed: int) -> float:
        """Trailing-window volume, extrapolated while the window is still filling."""
        elapsed = t - self.kernel.clock.open_ns
        if elapsed >= self._window:
            return observed
        if observed == 0:
            return self.cfg.prior_volume
        return observed * self._window / max(elapsed, self._warmup)

    def receive(self, t, view: MarketView):
        if crumble_side(self.cfg, self.beta) is None:
            # after a withdrawal the frozen reference is used once to restore the book
            if self._neutral and view.mid is not None:
                self.ref = view.mid
            self._neutral = True
        else:
            self._neutral = False
        msgs = mm_quote_update(self.cfg, view, self.beta, self.volume_estimate(t, view.volume),
                               self.kernel.next_order_id, self.ref, self.agent_id)
        self.submit(msgs)
