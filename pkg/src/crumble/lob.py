"""Integer limit order book with price-time priority and per-level flow accounting.

Prices are integer cents on a one-cent grid and quantities are integer
shares, so every depth and flow quantity is exact.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

TICK = 1  # cents


class Side(str, Enum):
    BID = "bid"
    ASK = "ask"

    @property
    def opposite(self) -> "Side":
        return Side.ASK if self is Side.BID else Side.BID

    @property
    def sign(self) -> int:
        # deterioration direction: ask moves up, bid moves down
        return 1 if self is Side.ASK else -1


class Kind(str, Enum):
    LIMIT_ADD = "LimitAdd"
    CANCEL = "Cancel"
    MARKET = "MarketOrder"


class BookError(ValueError):
    pass


@dataclass(slots=True)
class MarketMessage:
    """One order event. For MarketOrder ``side`` is the aggressor side."""

    timestamp: int
    kind: Kind
    side: Side
    quantity: int
    order_id: int
    price: Optional[int] = None
    agent_id: int = -1

    def __post_init__(self):
        if self.quantity <= 0:
            raise BookError(f"non-positive quantity {self.quantity}")
        if self.kind is Kind.MARKET:
            if self.price is not None:
                raise BookError("market order carries a price")
        elif self.price is None:
            raise BookError(f"{self.kind.value} requires a price")

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "side": self.side.value,
            "price": self.price,
            "quantity": self.quantity,
            "order_id": self.order_id,
            "agent_id": self.agent_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketMessage":
        price = d.get("price")
        return cls(
            timestamp=int(d["timestamp"]),
            kind=Kind(d["kind"]),
            side=Side(d["side"]),
            quantity=int(d["quantity"]),
            order_id=int(d["order_id"]),
            price=None if price is None or price == "" else int(price),
            agent_id=int(d.get("agent_id", -1)),
        )


@dataclass(slots=True)
class Fill:
    order_id: int  # resting order
    agent_id: int
    side: Side  # resting side
    price: int
    quantity: int


@dataclass(slots=True)
class BookEffect:
    accepted: bool = True
    fills: list = field(default_factory=list)
    # (side, price, added, canceled, executed)
    changes: list = field(default_factory=list)
    best_bid: Optional[int] = None
    best_ask: Optional[int] = None
    discarded: int = 0
    canceled_quantity: int = 0
    canceled_price: Optional[int] = None

    @property
    def executed(self) -> int:
        return sum(f.quantity for f in self.fills)


class _Order:
    __slots__ = ("order_id", "side", "price", "qty", "agent_id")

    def __init__(self, order_id, side, price, qty, agent_id):
        self.order_id = order_id
        self.side = side
        self.price = price
        self.qty = qty
        self.agent_id = agent_id


class OrderBook:
    """Continuous double auction book.

    Resting queues are FIFO per price level. Canceled orders are removed
    lazily from the queue (their id stays until it reaches the front).
    """

    def __init__(self):
        self._orders: dict[int, _Order] = {}
        self._queues = {Side.BID: {}, Side.ASK: {}}
        self._depth = {Side.BID: {}, Side.ASK: {}}
        # ascending price lists of non-empty levels
        self._prices = {Side.BID: [], Side.ASK: []}
        self.flow: dict[tuple[Side, int], list[int]] = {}

    # -- queries ---------------------------------------------------------
    @property
    def best_bid(self) -> Optional[int]:
        p = self._prices[Side.BID]
        return p[-1] if p else None

    @property
    def best_ask(self) -> Optional[int]:
        p = self._prices[Side.ASK]
        return p[0] if p else None

    def best(self, side: Side) -> Optional[int]:
        return self.best_bid if side is Side.BID else self.best_ask

    def depth(self, side: Side, price: int) -> int:
        return self._depth[side].get(price, 0)

    def levels(self, side: Side) -> dict[int, int]:
        return dict(self._depth[side])

    def depth_ladder(self, side: Side, n: int) -> list[int]:
        """Depth at the ``n`` grid prices starting at the best quote, moving away."""
        best = self.best(side)
        if best is None:
            return [0] * n
        d = self._depth[side]
        step = -TICK if side is Side.BID else TICK
        return [d.get(best + k * step, 0) for k in range(n)]

    def order(self, order_id: int):
        o = self._orders.get(order_id)
        if o is None:
            return None
        return (o.side, o.price, o.qty, o.agent_id)

    def orders_of(self, agent_id: int) -> dict[int, tuple[Side, int, int]]:
        return {
            oid: (o.side, o.price, o.qty)
            for oid, o in self._orders.items()
            if o.agent_id == agent_id
        }

    def flow_counters(self, side: Side, price: int) -> tuple[int, int, int]:
        c = self.flow.get((side, price))
        return (0, 0, 0) if c is None else tuple(c)

    # -- mutation ----------------------------------------------------------
    def _flow(self, side, price, idx, qty):
        key = (side, price)
        c = self.flow.get(key)
        if c is None:
            c = self.flow[key] = [0, 0, 0]
        c[idx] += qty

    def _rest(self, o: _Order):
        side, price = o.side, o.price
        depth = self._depth[side]
        if price in depth:
            depth[price] += o.qty
            self._queues[side][price].append(o.order_id)
        else:
            depth[price] = o.qty
            self._queues[side][price] = deque([o.order_id])
            bisect.insort(self._prices[side], price)
        self._orders[o.order_id] = o

    def _drop_level(self, side, price):
        del self._depth[side][price]
        del self._queues[side][price]
        prices = self._prices[side]
        del prices[bisect.bisect_left(prices, price)]

    def _match(self, aggressor: Side, qty: int, limit: Optional[int], effect: BookEffect) -> int:
        """Match ``qty`` against the side opposite ``aggressor``; return the unfilled rest."""
        rest_side = aggressor.opposite
        prices = self._prices[rest_side]
        depth = self._depth[rest_side]
        queues = self._queues[rest_side]
        orders = self._orders
        while qty > 0 and prices:
            price = prices[-1] if rest_side is Side.BID else prices[0]
            if limit is not None:
                if aggressor is Side.BID and price > limit:
                    break
                if aggressor is Side.ASK and price < limit:
                    break
            q = queues[price]
            executed_here = 0
            while qty > 0 and q:
                o = orders.get(q[0])
                if o is None:
                    q.popleft()
                    continue
                take = o.qty if o.qty <= qty else qty
                o.qty -= take
                qty -= take
                executed_here += take
                effect.fills.append(Fill(o.order_id, o.agent_id, rest_side, price, take))
                if o.qty == 0:
                    del orders[o.order_id]
                    q.popleft()
            if executed_here:
                self._flow(rest_side, price, 2, executed_here)
                effect.changes.append((rest_side, price, 0, 0, executed_here))
                depth[price] -= executed_here
            if depth[price] == 0:
                self._drop_level(rest_side, price)
        return qty

    def apply(self, msg: MarketMessage) -> BookEffect:
        """Apply one message. Invalid cancels are rejected and leave the book unchanged."""
        effect = BookEffect()
        kind = msg.kind
        if kind is Kind.LIMIT_ADD:
            if msg.order_id in self._orders:
                raise BookError(f"duplicate order id {msg.order_id}")
            left = self._match(msg.side, msg.quantity, msg.price, effect)
            if left:
                self._rest(_Order(msg.order_id, msg.side, msg.price, left, msg.agent_id))
                self._flow(msg.side, msg.price, 0, left)
                effect.changes.append((msg.side, msg.price, left, 0, 0))
        elif kind is Kind.MARKET:
            left = self._match(msg.side, msg.quantity, None, effect)
            if left:
                effect.discarded = left
                logger.debug("market order %d: %d shares unfilled, discarded", msg.order_id, left)
        elif kind is Kind.CANCEL:
            o = self._orders.get(msg.order_id)
            if o is None:
                logger.debug("cancel of unknown order %d rejected", msg.order_id)
                effect.accepted = False
            else:
                del self._orders[msg.order_id]
                side, price, qty = o.side, o.price, o.qty
                depth = self._depth[side]
                depth[price] -= qty
                if depth[price] == 0:
                    self._drop_level(side, price)
                self._flow(side, price, 1, qty)
                effect.changes.append((side, price, 0, qty, 0))
                effect.canceled_quantity = qty
                effect.canceled_price = price
        else:  # pragma: no cover
            raise BookError(f"unknown kind {kind}")
        effect.best_bid = self.best_bid
        effect.best_ask = self.best_ask
        return effect

    def state_key(self) -> tuple:
        """Hashable summary of the full book state (for replay comparisons)."""
        orders = tuple(
            sorted((oid, o.side.value, o.price, o.qty, o.agent_id) for oid, o in self._orders.items())
        )
        queues = tuple(
            (s.value, p, tuple(i for i in q if i in self._orders))
            for s in (Side.BID, Side.ASK)
            for p, q in sorted(self._queues[s].items())
        )
        flow = tuple(sorted((s.value, p, tuple(c)) for (s, p), c in self.flow.items()))
        return orders, queues, flow


def best_quotes(book: OrderBook) -> tuple[Optional[int], Optional[int]]:
    return book.best_bid, book.best_ask


def apply_message(book: OrderBook, msg: MarketMessage) -> BookEffect:
    return book.apply(msg)


def replay(messages: Iterable[MarketMessage], book: Optional[OrderBook] = None) -> OrderBook:
    book = OrderBook() if book is None else book
    for m in messages:
        book.apply(m)
    return book


# -- flow accounting over time -----------------------------------------------

class FlowLedger:
    """Cumulative add/cancel/execute volume per (side, price) as step functions of time.

    Built by replaying a message log. ``volumes(side, p, u, v)`` returns the
    flow over the half-open interval (u, v]; ``depth(side, p, t)`` is the
    resting depth just after all updates at time ``t``.
    """

    def __init__(self, records: dict):
        self._tables = {}
        for key, rows in records.items():
            arr = np.asarray(rows, dtype=np.int64)
            t = arr[:, 0]
            cum = np.cumsum(arr[:, 1:], axis=0)
            self._tables[key] = (t, cum)

    @classmethod
    def from_messages(cls, messages: Iterable[MarketMessage]) -> "FlowLedger":
        book = OrderBook()
        records: dict = {}
        for m in messages:
            eff = book.apply(m)
            for side, price, a, c, e in eff.changes:
                records.setdefault((side, price), []).append((m.timestamp, a, c, e))
        return cls(records)

    def keys(self):
        return self._tables.keys()

    def _cum(self, side: Side, price: int, t) -> np.ndarray:
        tab = self._tables.get((side, price))
        if tab is None:
            return np.zeros(3, dtype=np.int64)
        times, cum = tab
        i = np.searchsorted(times, t, side="right")
        if i == 0:
            return np.zeros(3, dtype=np.int64)
        return cum[i - 1]

    def volumes(self, side: Side, price: int, u: int, v: int) -> tuple[int, int, int]:
        if u > v:
            raise ValueError("u must not exceed v")
        d = self._cum(side, price, v) - self._cum(side, price, u)
        return int(d[0]), int(d[1]), int(d[2])

    def depth(self, side: Side, price: int, t: int) -> int:
        c = self._cum(side, price, t)
        return int(c[0] - c[1] - c[2])

    def depth_before(self, side: Side, price: int, t: int) -> int:
        """Depth at the left limit t⁻ (updates at exactly t excluded)."""
        return self.depth(side, price, t - 1)

    def volumes_many(self, side: Side, prices, u: int, v: int) -> np.ndarray:
        out = np.zeros(3, dtype=np.int64)
        for p in prices:
            out += self._cum(side, p, v) - self._cum(side, p, u)
        return out


def flow_volumes(messages: Iterable[MarketMessage], side: Side, price: int, u: int, v: int):
    """(A, C, E) at ``(side, price)`` over the interval (u, v], recomputed from the raw log."""
    if u > v:
        raise ValueError("u must not exceed v")
    book = OrderBook()
    a = c = e = 0
    for m in messages:
        eff = book.apply(m)
        if u < m.timestamp <= v:
            for s, p, da, dc, de in eff.changes:
                if s is side and p == price:
                    a += da
                    c += dc
                    e += de
    return a, c, e
