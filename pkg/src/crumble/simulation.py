"""Market configuration and one-call session simulation."""

from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass

from .agents import (HawkesCfg, MarketMaker, MarketMakerCfg, MomentumAgent, MomentumAgentCfg, NoiseAgent,
                     NoiseAgentCfg, ValueAgent, ValueAgentCfg, VolatilityAgent, VolatilityAgentCfg)
from .kernel import NS_PER_S, Exchange, FundamentalProcess, LatencyTable, RunOutput, SimClock, run

REGIMES = ("baseline", "bull", "bear", "high_vol")


@dataclass
class FundamentalCfg:
    p0: int = 10_000
    mean_reversion: float = 0.01  # per second
    volatility: float = 5.0  # ticks per sqrt(second)
    drift_per_hour: float = 0.0  # ticks per hour


@dataclass
class MarketConfig:
    seed: int = 0
    session_hours: float = 2.0
    snapshot_levels: int = 10
    latency: LatencyTable = field(default_factory=LatencyTable)
    fundamental: FundamentalCfg = field(default_factory=FundamentalCfg)
    noise: NoiseAgentCfg = field(default_factory=NoiseAgentCfg)
    value: ValueAgentCfg = field(default_factory=ValueAgentCfg)
    momentum: MomentumAgentCfg = field(default_factory=MomentumAgentCfg)
    volatility: VolatilityAgentCfg = field(default_factory=VolatilityAgentCfg)
    market_maker: MarketMakerCfg = field(default_factory=MarketMakerCfg)
    hawkes: HawkesCfg = field(default_factory=HawkesCfg)

    @property
    def close_ns(self) -> int:
        return int(round(self.session_hours * 3600 * NS_PER_S))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d):
    kwargs = {}
    hints = {f.name: f for f in fields(cls)}
    for k, v in d.items():
        if k not in hints:
            raise KeyError(f"unknown config key {k!r} for {cls.__name__}")
        factory = hints[k].default_factory
        default = factory() if factory is not MISSING else None
        if is_dataclass(default) and isinstance(v, dict):
            v = _from_dict(type(default), v)
        kwargs[k] = v
    return cls(**kwargs)


def apply_regime(cfg: MarketConfig, regime: str) -> MarketConfig:
    """Set the drift and volatility-agent population for a named market regime."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    drift = {"bull": 10.0, "bear": -10.0}.get(regime, 0.0)
    cfg.fundamental.drift_per_hour = drift
    cfg.volatility.count = 50 if regime == "high_vol" else 0
    return cfg


def build_agents(cfg: MarketConfig, clock: SimClock):
    fund = FundamentalProcess(cfg.fundamental.p0, clock, cfg.fundamental.mean_reversion,
                              cfg.fundamental.volatility, cfg.fundamental.drift_per_hour, cfg.seed)
    lat = cfg.latency
    agents = []
    aid = 1
    agents.append(MarketMaker(aid, lat.for_class("market_maker"), cfg.market_maker, cfg.hawkes,
                              initial_mid=cfg.fundamental.p0 + 0.5))
    aid += 1
    for _ in range(cfg.noise.count):
        agents.append(NoiseAgent(aid, lat.background, cfg.noise))
        aid += 1
    for _ in range(cfg.value.count):
        agents.append(ValueAgent(aid, lat.background, cfg.value, fund))
        aid += 1
    for _ in range(cfg.momentum.count):
        agents.append(MomentumAgent(aid, lat.background, cfg.momentum))
        aid += 1
    for _ in range(cfg.volatility.count):
        agents.append(VolatilityAgent(aid, lat.background, cfg.volatility))
        aid += 1
    return agents, fund


def simulate(cfg: MarketConfig) -> RunOutput:
    clock = SimClock(close_ns=cfg.close_ns)
    exchange = Exchange(cfg.snapshot_levels, int(cfg.market_maker.volume_window_s * NS_PER_S))
    agents, fund = build_agents(cfg, clock)
    out = run(agents, exchange, clock, cfg.seed)
    out.meta["fundamental"] = fund
    return out
