"""Discrete-event kernel: nanosecond clock, latency-delayed messaging, exchange agent."""

from __future__ import annotations

import bisect
from array import array
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .lob import Kind, MarketMessage, OrderBook, Side

NS_PER_S = 1_000_000_000
NS_PER_MS = 1_000_000
NS_PER_US = 1_000
EXCHANGE_ID = 0


class SimulationError(RuntimeError):
    pass


@dataclass
class SimClock:
    close_ns: int
    open_ns: int = 0
    now: int = 0
    # wall-clock label of the open; timestamps are relative to it
    open_label: str = "09:30"

    def __post_init__(self):
        if self.close_ns <= self.open_ns:
            raise SimulationError("session close must be after open")
        self.now = self.open_ns

    @property
    def span_ns(self) -> int:
        return self.close_ns - self.open_ns

    def hours_elapsed(self, t: int) -> float:
        return (t - self.open_ns) / (3600 * NS_PER_S)


@dataclass
class LatencyTable:
    market_maker: int = 100 * NS_PER_US
    background: int = 1 * NS_PER_MS

    def __post_init__(self):
        if self.market_maker < 0 or self.background < 0:
            raise SimulationError("latencies must be non-negative")

    def for_class(self, agent_class: str) -> int:
        return self.market_maker if agent_class == "market_maker" else self.background


def agent_seed(master_seed: int, agent_id: int) -> int:
    """Independent per-agent stream, stable under adding or removing other agents."""
    state = np.random.SeedSequence([int(master_seed), int(agent_id)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


class FundamentalProcess:
    """Mean-reverting latent value with linear drift, sampled lazily on the price grid.

    The latent deviation X follows dX = -k X dt + s dW with X(open) = 0.
    Values are cached per query time; a query between two cached times is
    drawn from the exact Ornstein-Uhlenbeck bridge so the path stays
    consistent whatever order it is queried in.
    """

    def __init__(self, p0: int, clock: SimClock, mean_reversion: float = 0.01,
                 volatility: float = 5.0, drift_per_hour: float = 0.0, seed: int = 0):
        self.p0 = p0
        self.clock = clock
        self.k = float(mean_reversion)
        self.sigma = float(volatility)
        self.drift = float(drift_per_hour)
        self._rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF00D]))
        self._times = [clock.open_ns]
        self._x = [0.0]

    def _decay_var(self, dt_s: float) -> tuple[float, float]:
        if self.k == 0.0:
            return 1.0, self.sigma ** 2 * dt_s
        a = math.exp(-self.k * dt_s)
        return a, self.sigma ** 2 * (1.0 - a * a) / (2.0 * self.k)

    def latent(self, t: int) -> float:
        if not self.clock.open_ns <= t <= self.clock.close_ns:
            raise SimulationError(f"time {t} outside session")
        if self.sigma == 0.0:
            return 0.0
        times = self._times
        i = bisect.bisect_left(times, t)
        if i < len(times) and times[i] == t:
            return self._x[i]
        if i == len(times):
            a, var = self._decay_var((t - times[-1]) / NS_PER_S)
            x = a * self._x[-1] + math.sqrt(var) * self._rng.standard_normal()
        else:
            # bridge between times[i-1] and times[i]
            a1, v1 = self._decay_var((t - times[i - 1]) / NS_PER_S)
            a2, v2 = self._decay_var((times[i] - t) / NS_PER_S)
            m = a1 * self._x[i - 1]
            var = 1.0 / (1.0 / v1 + a2 * a2 / v2)
            mean = var * (m / v1 + a2 * self._x[i] / v2)
            x = mean + math.sqrt(var) * self._rng.standard_normal()
        times.insert(i, t)
        self._x.insert(i, x)
        return x

    def trend(self, t: int) -> float:
        return self.p0 + self.drift * self.clock.hours_elapsed(t)

    def value(self, t: int) -> int:
        return int(round(self.trend(t) + self.latent(t)))


# -- messages between agents and the exchange ---------------------------------

@dataclass(slots=True)
class Query:
    agent_id: int
    with_orders: bool = False
    volume_window_ns: int = 0
    n_trades: int = 0


@dataclass(slots=True)
class MarketView:
    time: int
    bid: Optional[int]
    ask: Optional[int]
    bid_depth: int
    ask_depth: int
    volume: int = 0
    trades: tuple = ()
    orders: Optional[dict] = None

    @property
    def mid(self) -> Optional[float]:
        if self.bid is None or self.ask is None:
            return None
        return (self.bid + self.ask) / 2


class SnapshotRecorder:
    def __init__(self, levels: int):
        self.levels = levels
        self.rows = array("q")  # flat row-major buffer

    def record(self, t: int, book: OrderBook, totals: dict):
        bid, ask = book.best_bid, book.best_ask
        bl = book.depth_ladder(Side.BID, self.levels)
        al = book.depth_ladder(Side.ASK, self.levels)
        self.rows.extend((t, -1 if bid is None else bid, -1 if ask is None else ask,
                          bl[0], al[0], *bl, *al, *totals[Side.BID], *totals[Side.ASK]))


@dataclass
class SnapshotStream:
    """Columnar snapshot stream. Missing quotes are ``-1`` in ``bid``/``ask``."""

    time: np.ndarray
    bid: np.ndarray
    ask: np.ndarray
    bid_depth1: np.ndarray
    ask_depth1: np.ndarray
    bid_levels: np.ndarray
    ask_levels: np.ndarray
    bid_flow: np.ndarray  # cumulative (A, C, E) summed over all bid levels
    ask_flow: np.ndarray

    @classmethod
    def from_rows(cls, rows: list, levels: int) -> "SnapshotStream":
        width = 5 + 2 * levels + 6
        if isinstance(rows, array):
            arr = np.frombuffer(rows, dtype=np.int64).reshape(-1, width).copy()
        else:
            arr = np.asarray(rows, dtype=np.int64).reshape(-1, width)
        L = levels
        return cls(
            time=arr[:, 0], bid=arr[:, 1], ask=arr[:, 2],
            bid_depth1=arr[:, 3], ask_depth1=arr[:, 4],
            bid_levels=arr[:, 5:5 + L], ask_levels=arr[:, 5 + L:5 + 2 * L],
            bid_flow=arr[:, 5 + 2 * L:8 + 2 * L], ask_flow=arr[:, 8 + 2 * L:11 + 2 * L],
        )

    @property
    def levels(self) -> int:
        return self.bid_levels.shape[1]

    def __len__(self):
        return len(self.time)

    def columns(self) -> list[str]:
        L = self.levels
        return (["timestamp", "bid", "ask", "bid_depth1", "ask_depth1"]
                + [f"bid_l{i}" for i in range(L)] + [f"ask_l{i}" for i in range(L)]
                + ["bid_added", "bid_canceled", "bid_executed",
                   "ask_added", "ask_canceled", "ask_executed"])

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.time, self.bid, self.ask, self.bid_depth1, self.ask_depth1,
                                self.bid_levels, self.ask_levels, self.bid_flow, self.ask_flow])


class Exchange:
    """The exchange agent: owns the book, stamps and logs messages, answers queries."""

    agent_id = EXCHANGE_ID
    agent_class = "exchange"

    def __init__(self, snapshot_levels: int = 10, volume_window_ns: int = 60 * NS_PER_S):
        self.book = OrderBook()
        self.log: list[MarketMessage] = []
        self.snapshots = SnapshotRecorder(snapshot_levels)
        self.volume_window_ns = volume_window_ns
        self._trades: deque = deque()  # (time, price, qty)
        self._volume = 0
        self._totals = {Side.BID: [0, 0, 0], Side.ASK: [0, 0, 0]}
        self.rejected = 0
        self.kernel = None

    def start(self, kernel: "Kernel"):
        self.kernel = kernel
        self.snapshots.record(kernel.clock.open_ns, self.book, self._totals)

    def finish(self, kernel: "Kernel"):
        self.snapshots.record(kernel.clock.close_ns, self.book, self._totals)

    def _trim(self, t: int):
        trades = self._trades
        horizon = t - self.volume_window_ns
        while trades and trades[0][0] <= horizon:
            self._volume -= trades.popleft()[2]

    def receive(self, t: int, payload):
        if isinstance(payload, MarketMessage):
            self._handle_order(t, payload)
        elif isinstance(payload, Query):
            self.kernel.send(self.agent_id, payload.agent_id, self.view(t, payload))
        else:
            raise SimulationError(f"exchange cannot handle {payload!r}")

    def _handle_order(self, t: int, msg: MarketMessage):
        if msg.kind is Kind.CANCEL:
            info = self.book.order(msg.order_id)
            if info is None:
                self.rejected += 1
                return
            side, price, qty, _ = info
            msg = MarketMessage(t, Kind.CANCEL, side, qty, msg.order_id, price, msg.agent_id)
        else:
            msg = replace(msg, timestamp=t)
        eff = self.book.apply(msg)
        if not eff.accepted:  # pragma: no cover - unknown ids filtered above
            self.rejected += 1
            return
        self.log.append(msg)
        for f in eff.fills:
            self._trades.append((t, f.price, f.quantity))
            self._volume += f.quantity
        if eff.changes:
            totals = self._totals
            for side, _, a, c, e in eff.changes:
                tot = totals[side]
                tot[0] += a
                tot[1] += c
                tot[2] += e
            self.snapshots.record(t, self.book, totals)

    def view(self, t: int, q: Query) -> MarketView:
        book = self.book
        bid, ask = book.best_bid, book.best_ask
        self._trim(t)
        volume = 0
        if q.volume_window_ns:
            if q.volume_window_ns == self.volume_window_ns:
                volume = self._volume
            else:
                volume = sum(x[2] for x in self._trades if x[0] > t - q.volume_window_ns)
        trades = ()
        if q.n_trades:
            trades = tuple(x[1] for x in list(self._trades)[-q.n_trades:])
        return MarketView(
            time=t, bid=bid, ask=ask,
            bid_depth=0 if bid is None else book.depth(Side.BID, bid),
            ask_depth=0 if ask is None else book.depth(Side.ASK, ask),
            volume=volume, trades=trades,
            orders=book.orders_of(q.agent_id) if q.with_orders else None,
        )


class Kernel:
    """Single-threaded event loop ordered by (fire_time, sequence number)."""

    def __init__(self, clock: SimClock, exchange: Exchange, seed: int = 0):
        self.clock = clock
        self.exchange = exchange
        self.seed = seed
        self.agents = {EXCHANGE_ID: exchange}
        self._heap: list = []
        self._seq = 0
        self._next_order_id = 1
        self.events_processed = 0

    @property
    def now(self) -> int:
        return self.clock.now

    def register(self, agent):
        if agent.agent_id in self.agents:
            raise SimulationError(f"duplicate agent id {agent.agent_id}")
        self.agents[agent.agent_id] = agent
        agent.rng = random.Random(agent_seed(self.seed, agent.agent_id))

    def next_order_id(self) -> int:
        oid = self._next_order_id
        self._next_order_id += 1
        return oid

    def schedule(self, fire_time: int, recipient: int, payload=None):
        if fire_time < self.clock.now:
            raise SimulationError(
                f"event for {recipient} scheduled at {fire_time} before current time {self.clock.now}")
        heapq.heappush(self._heap, (fire_time, self._seq, recipient, payload))
        self._seq += 1

    def latency(self, agent_id: int) -> int:
        return self.agents[agent_id].latency

    def send(self, sender: int, recipient: int, payload):
        # one-way delay is the non-exchange party's latency, symmetric in both directions
        other = recipient if sender == EXCHANGE_ID else sender
        self.schedule(self.clock.now + self.agents[other].latency, recipient, payload)

    def submit(self, agent_id: int, msg: MarketMessage):
        self.send(agent_id, EXCHANGE_ID, msg)

    def run(self):
        clock = self.clock
        self.exchange.start(self)
        for aid, agent in self.agents.items():
            if aid != EXCHANGE_ID:
                agent.start(self)
        heap = self._heap
        agents = self.agents
        close = clock.close_ns
        pop = heapq.heappop
        n = 0
        while heap:
            t, _, rid, payload = heap[0]
            if t > close:
                break
            pop(heap)
            clock.now = t
            agent = agents[rid]
            if payload is None:
                agent.wakeup(t)
            else:
                agent.receive(t, payload)
            n += 1
        clock.now = close
        self.events_processed = n
        self.exchange.finish(self)


@dataclass
class RunOutput:
    messages: list
    snapshots: SnapshotStream
    regime: list  # RegimeRecord rows
    rejected_cancels: int = 0
    events: int = 0
    meta: dict = field(default_factory=dict)


def run(agents, exchange: Exchange, clock: SimClock, seed: int) -> RunOutput:
    """Register ``agents`` with a fresh kernel, run the session and collect outputs."""
    kernel = Kernel(clock, exchange, seed)
    for a in agents:
        kernel.register(a)
    kernel.run()
    regime = []
    for a in agents:
        regime.extend(getattr(a, "regime_trace", ()))
    regime.sort(key=lambda r: r.timestamp)
    return RunOutput(
        messages=exchange.log,
        snapshots=SnapshotStream.from_rows(exchange.snapshots.rows, exchange.snapshots.levels),
        regime=regime,
        rejected_cancels=exchange.rejected,
        events=kernel.events_processed,
    )
