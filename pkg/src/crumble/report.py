"""SVG figures and a markdown summary for a sweep directory."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402
from .evaluation import METHODS  # noqa: E402

plt.rcParams["svg.hashsalt"] = "crumble"
LABELS = {"binary": "binary rule", "rff": "RFF logistic", "mlp": "MLP + temporal", "mlp_no_temporal": "MLP"}


def _runs(sweep_dir: Path) -> list[Path]:
    return sorted(p.parent for p in sweep_dir.glob("*/seed_*/metrics.json"))


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def roc_panels(sweep_dir: Path, driver: str = "bernoulli") -> Path:
    groups: dict = {}
    for run in _runs(sweep_dir):
        regime, drv = run.parent.name.rsplit("_", 1)
        if drv == driver:
            groups.setdefault(regime, []).append(io.read_json(run / "metrics.json"))
    regimes = sorted(groups)
    fig, axes = plt.subplots(1, max(1, len(regimes)), figsize=(4 * max(1, len(regimes)), 4), squeeze=False)
    for ax, regime in zip(axes[0], regimes):
        for m in ("binary", "rff", "mlp"):
            curves = [r["methods"][m] for r in groups[regime] if r["methods"].get(m, {}).get("roc")]
            if not curves:
                continue
            roc = np.asarray(curves[0]["roc"])
            auc = np.mean([c["auc"] for c in curves])
            ax.plot(roc[:, 0], roc[:, 1], label=f"{LABELS[m]} (AUC {auc:.2f})")
        ax.plot([0, 1], [0, 1], color="grey", lw=0.5, ls="--")
        ax.set_title(regime)
        ax.set_xlabel("false positive rate")
        ax.legend(loc="lower right", fontsize=7)
    axes[0][0].set_ylabel("true positive rate")
    path = sweep_dir / "figures" / "roc_regimes.svg"
    _save(fig, path)
    return path


def ablation_roc(sweep_dir: Path) -> Path:
    runs = [r for r in _runs(sweep_dir) if r.parent.name.endswith("_hawkes")] or _runs(sweep_dir)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    if runs:
        metrics = [io.read_json(r / "metrics.json") for r in runs]
        for m in ("mlp_no_temporal", "mlp"):
            curves = [x["methods"][m] for x in metrics if x["methods"].get(m, {}).get("roc")]
            if curves:
                roc = np.asarray(curves[0]["roc"])
                ax.plot(roc[:, 0], roc[:, 1], label=f"{LABELS[m]} (AUC {np.mean([c['auc'] for c in curves]):.2f})")
    ax.plot([0, 1], [0, 1], color="grey", lw=0.5, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    path = sweep_dir / "figures" / "temporal_ablation_roc.svg"
    _save(fig, path)
    return path


def price_trace(run_dir: Path, out: Path, method: str = "mlp") -> Path:
    """Mid-price with detected events (top) and their gated probabilities (bottom)."""
    run_dir, out = Path(run_dir), Path(out)
    snaps = io.read_snapshots(run_dir / "snapshots.csv")[0]
    ok = (snaps.bid >= 0) & (snaps.ask >= 0)
    t = snaps.time[ok] / 3.6e12
    mid = (snaps.bid[ok] + snaps.ask[ok]) / 2.0
    step = max(1, len(t) // 5000)
    scores = [r for r in io.read_table(run_dir / "scores.csv") if r["session"] == "0"]
    col = f"p_{method}" if scores and f"p_{method}" in scores[0] else "p_binary"
    fig, (top, bot) = plt.subplots(2, 1, sharex=True, figsize=(9, 5), gridspec_kw={"height_ratios": [2, 1]})
    top.plot(t[::step], mid[::step] / 100.0, lw=0.6, color="black")
    for side, marker, color in (("ask", "^", "tab:red"), ("bid", "v", "tab:blue")):
        ev = [r for r in scores if r["side"] == side]
        te = np.array([int(r["t1"]) for r in ev]) / 3.6e12
        if len(te):
            idx = np.clip(np.searchsorted(t, te), 0, len(t) - 1)
            top.scatter(te, mid[idx] / 100.0, marker=marker, s=12, color=color, label=f"{side} event")
    top.set_ylabel("mid price")
    top.legend(fontsize=7, loc="upper left")
    te = np.array([int(r["t1"]) for r in scores]) / 3.6e12
    p = np.array([float(r[col]) for r in scores])
    bot.vlines(te, 0, p, lw=0.6, color="tab:purple")
    bot.fill_between(te, 0, p, step="mid", alpha=0.2, color="tab:purple")
    bot.set_ylim(0, 1)
    bot.set_ylabel("probability")
    bot.set_xlabel("hours")
    _save(fig, out)
    return out


def make_report(sweep_dir) -> list[Path]:
    sweep_dir = Path(sweep_dir)
    runs = _runs(sweep_dir)
    if not runs:
        if (sweep_dir / "metrics.json").exists():
            return [price_trace(sweep_dir, sweep_dir / "figures" / "price_trace.svg")]
        raise FileNotFoundError(f"no runs with metrics.json under {sweep_dir}")
    figs = [roc_panels(sweep_dir), ablation_roc(sweep_dir)]
    hawkes = [r for r in runs if r.parent.name.endswith("_hawkes")]
    figs.append(price_trace((hawkes or runs)[0], sweep_dir / "figures" / "price_trace.svg"))
    lines = ["# Sweep summary", "", "| regime | driver | method | mean AUC | std |", "|---|---|---|---|---|"]
    agg = sweep_dir / "aggregate.csv"
    if agg.exists():
        rows = io.read_table(agg)
        for r in rows:
            if r["seed"] != "mean":
                continue
            sd = next((x["auc"] for x in rows if x["seed"] == "std" and
                       (x["regime"], x["driver"], x["method"]) == (r["regime"], r["driver"], r["method"])), "")
            fmt = lambda v: f"{float(v):.3f}" if v else "NA"  # noqa: E731
            lines.append(f"| {r['regime']} | {r['driver']} | {r['method']} | {fmt(r['auc'])} | {fmt(sd)} |")
    lines += ["", "Figures: " + ", ".join(f"`figures/{p.name}`" for p in figs), ""]
    (sweep_dir / "report.md").write_text("\n".join(lines))
    return figs


__all__ = ["make_report", "roc_panels", "ablation_roc", "price_trace", "METHODS"]
