"""Run-directory artifacts: message logs, snapshot and table CSVs, deterministic JSON."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kernel import SnapshotStream
from .lob import MarketMessage


def fmt(v) -> str:
    """Shortest round-trip text for a CSV cell; NaN and None become empty."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return str(v)


def parse_float(s: str) -> float:
    return float("nan") if s == "" else float(s)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed separators, NaN mapped to null."""
    return json.dumps(_clean(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):  # enums
        return obj.value
    return obj


def write_json(path: Path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def config_digest(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()[:16]


# -- messages -------------------------------------------------------------------------

def write_messages(path: Path, sessions: Sequence[Sequence[MarketMessage]]):
    """JSON lines, one message per line with sorted keys, tagged with its session index."""
    with open(path, "w") as fh:
        for k, msgs in enumerate(sessions):
            fh.writelines(
                f'{{"agent_id":{m.agent_id},"kind":"{m.kind.value}","order_id":{m.order_id},'
                f'"price":{"null" if m.price is None else m.price},"quantity":{m.quantity},'
                f'"session":{k},"side":"{m.side.value}","timestamp":{m.timestamp}}}\n'
                for m in msgs)


def read_messages(path: Path, strip_agents: bool = False) -> list[list[MarketMessage]]:
    out: list[list[MarketMessage]] = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            k = int(d.pop("session", 0))
            if strip_agents:
                d.pop("agent_id", None)
            while len(out) <= k:
                out.append([])
            out[k].append(MarketMessage.from_dict(d))
    return out


MESSAGE_COLUMNS = ["session", "timestamp", "kind", "side", "price", "quantity", "order_id", "agent_id"]


def write_messages_csv(path: Path, sessions: Sequence[Sequence[MarketMessage]]):
    """Columnar export of the message log; market orders leave ``price`` empty."""
    write_table(path, MESSAGE_COLUMNS,
                ([k, m.timestamp, m.kind.value, m.side.value, m.price, m.quantity, m.order_id, m.agent_id]
                 for k, msgs in enumerate(sessions) for m in msgs))


def read_messages_csv(path: Path) -> list[list[MarketMessage]]:
    out: list[list[MarketMessage]] = []
    for r in read_table(path):
        k = int(r.pop("session"))
        while len(out) <= k:
            out.append([])
        out[k].append(MarketMessage.from_dict(r))
    return out


# -- generic tables ---------------------------------------------------------------------

def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_table(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def read_header(path: Path) -> list[str]:
    with open(path, newline="") as fh:
        return next(csv.reader(fh), [])


# -- snapshots -----------------------------------------------------------------------------

def write_snapshots(path: Path, sessions: Sequence[SnapshotStream]):
    cols = sessions[0].columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session"] + cols)
        for k, s in enumerate(sessions):
            mat = s.as_matrix()
            w.writerows([k, *row] for row in mat.tolist())


def read_snapshots(path: Path) -> list[SnapshotStream]:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    levels = sum(1 for c in header if c.startswith("bid_l"))
    arr = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    out = []
    for k in np.unique(arr[:, 0]):
        rows = arr[arr[:, 0] == k, 1:]
        out.append(SnapshotStream.from_rows(rows, levels))
    return out


# -- regime trace and ground truth ---------------------------------------------------------

def write_regime(path: Path, sessions: Sequence[Sequence]):
    write_table(path, ["session", "timestamp", "beta", "driver", "switch"],
                ([k, r.timestamp, r.beta, r.driver, r.switch] for k, trace in enumerate(sessions) for r in trace))


def read_regime(path: Path) -> list[list[tuple[int, float, bool]]]:
    out: list[list] = []
    for r in read_table(path):
        k = int(r["session"])
        while len(out) <= k:
            out.append([])
        out[k].append((int(r["timestamp"]), float(r["beta"]), bool(int(r["switch"]))))
    return out
