import numpy as np
import pytest

from crumble.agents import Agent
from crumble.kernel import (NS_PER_MS, Exchange, FundamentalProcess, Kernel, LatencyTable, SimClock,
                            SimulationError, SnapshotStream, agent_seed, run)
from crumble.lob import Kind, MarketMessage, Side
from crumble.simulation import MarketConfig, apply_regime, simulate


class Recorder(Agent):
    def __init__(self, agent_id, latency, script=()):
        super().__init__(agent_id, latency)
        self.script = list(script)
        self.seen = []

    def start(self, kernel):
        super().start(kernel)
        for t in sorted({t for t, _ in self.script}):
            kernel.schedule(t, self.agent_id)

    def wakeup(self, t):
        self.seen.append(("wake", t))
        self.submit([m for s, m in self.script if s == t])
        self.query()

    def receive(self, t, payload):
        self.seen.append(("view", t, payload.bid, payload.ask))


def test_clock_rejects_empty_session():
    with pytest.raises(SimulationError):
        SimClock(close_ns=0)
    with pytest.raises(SimulationError):
        LatencyTable(market_maker=-1)


def test_schedule_in_past_raises():
    clock = SimClock(close_ns=10)
    k = Kernel(clock, Exchange())
    clock.now = 5
    with pytest.raises(SimulationError):
        k.schedule(4, 0)


def test_latency_delays_both_directions():
    lat = 3 * NS_PER_MS
    msg = MarketMessage(0, Kind.LIMIT_ADD, Side.BID, 10, 1, 9_999, 1)
    a = Recorder(1, lat, [(0, msg)])
    ex = Exchange(snapshot_levels=2)
    out = run([a], ex, SimClock(close_ns=10**9), seed=0)
    assert [m.timestamp for m in out.messages] == [lat]
    # query leaves at 0, reaches the exchange at lat (after the order), returns at 2 lat
    assert a.seen == [("wake", 0), ("view", 2 * lat, 9_999, None)]


def test_ties_are_fifo():
    clock = SimClock(close_ns=100)
    order = []

    class Tag(Agent):
        def wakeup(self, t):
            order.append(self.agent_id)

    k = Kernel(clock, Exchange())
    agents = [Tag(i, 0) for i in (3, 1, 2)]
    for a in agents:
        k.register(a)
    for a in agents:
        k.schedule(7, a.agent_id)
    k.run()
    assert order == [3, 1, 2]


def test_duplicate_agent_rejected():
    k = Kernel(SimClock(close_ns=10), Exchange())
    k.register(Recorder(1, 0))
    with pytest.raises(SimulationError):
        k.register(Recorder(1, 0))


def test_agent_seed_depends_only_on_master_and_id():
    assert agent_seed(5, 3) == agent_seed(5, 3)
    assert len({agent_seed(5, i) for i in range(100)}) == 100
    assert agent_seed(5, 3) != agent_seed(6, 3)


def test_fundamental_cached_and_in_session():
    clock = SimClock(close_ns=3600 * 10**9)
    f = FundamentalProcess(10_000, clock, seed=1)
    a = f.latent(10**12)
    b = f.latent(5 * 10**11)  # bridge between open and a cached time
    assert f.latent(10**12) == a and f.latent(5 * 10**11) == b
    with pytest.raises(SimulationError):
        f.latent(clock.close_ns + 1)
    flat = FundamentalProcess(10_000, clock, volatility=0.0, drift_per_hour=10.0)
    assert flat.value(clock.close_ns) == 10_010


def test_fundamental_stationary_variance():
    # exact OU transition: Var X(t) -> s^2 / 2k for large t
    clock = SimClock(close_ns=10**6 * 10**9)
    xs = []
    for seed in range(400):
        f = FundamentalProcess(0, clock, mean_reversion=0.5, volatility=1.0, seed=seed)
        xs.append(f.latent(10**5 * 10**9))
    assert np.var(xs) == pytest.approx(1.0, rel=0.2)


def test_snapshot_stream_layout():
    rows = [[5, 99, 101, 3, 4, 3, 2, 4, 1, 7, 0, 0, 2, 0, 1]]
    s = SnapshotStream.from_rows(rows, levels=2)
    assert len(s) == 1 and s.levels == 2
    assert list(s.bid_levels[0]) == [3, 2] and list(s.ask_levels[0]) == [4, 1]
    assert list(s.bid_flow[0]) == [7, 0, 0] and list(s.ask_flow[0]) == [2, 0, 1]
    assert s.as_matrix().tolist() == rows


def test_short_simulation_is_deterministic_and_consistent():
    cfg = MarketConfig(seed=11, session_hours=0.02)
    a, b = simulate(cfg), simulate(cfg)
    assert a.messages == b.messages
    assert np.array_equal(a.snapshots.as_matrix(), b.snapshots.as_matrix())
    ts = [m.timestamp for m in a.messages]
    assert ts == sorted(ts) and ts[-1] <= cfg.close_ns
    s = a.snapshots
    two = (s.bid >= 0) & (s.ask >= 0)
    assert np.all(s.ask[two] > s.bid[two])
    c = simulate(MarketConfig(seed=12, session_hours=0.02))
    assert c.messages != a.messages


def test_apply_regime():
    assert apply_regime(MarketConfig(), "bull").fundamental.drift_per_hour > 0
    assert apply_regime(MarketConfig(), "bear").fundamental.drift_per_hour < 0
    assert apply_regime(MarketConfig(), "high_vol").volatility.count > 0
    with pytest.raises(ValueError):
        apply_regime(MarketConfig(), "sideways")


def test_config_round_trip():
    cfg = apply_regime(MarketConfig(seed=3), "bull")
    assert MarketConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        MarketConfig.from_dict({"nope": 1})
