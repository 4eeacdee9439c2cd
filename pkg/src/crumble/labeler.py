"""Gated probabilistic labels: temporal context, robust scaling, a numpy MLP and an RFF baseline.

The MLP is written out by hand (forward pass, backpropagation and AdamW) in
float64 so that training is deterministic and gradients can be checked
against finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import erf, expit, log_expit

from .metrics import auc_score

log = logging.getLogger(__name__)

TEMPORAL_FEATURES = ("dt_rec", "n_rec", "sum_ds")
SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- temporal context ---------------------------------------------------------------

def temporal_features(starts: Sequence[int], ends: Sequence[int], ds: Sequence[float],
                      open_ns: int = 0, window_s: float = 60.0) -> np.ndarray:
    """(dt_rec seconds, n_rec, sum_DS) per event; events must be sorted by end time.

    dt_rec is clipped at zero when an event starts before its predecessor ends
    (possible when bid and ask events overlap).
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    ds = np.asarray(ds, dtype=np.float64)
    n = len(starts)
    if np.any(np.diff(ends) < 0):
        raise ValueError("events must be sorted by end time")
    if window_s <= 0:
        raise ValueError("window must be positive")
    window = int(round(window_s * 1e9))
    out = np.zeros((n, 3))
    for i in range(n):
        prev_end = ends[i - 1] if i else open_ns
        out[i, 0] = max(0, int(starts[i]) - int(prev_end)) / 1e9
        # ends[:i] is sorted, so the qualifying j form a suffix
        lo = int(np.searchsorted(ends[:i], starts[i] - window, side="right"))
        out[i, 1] = i - lo
        out[i, 2] = math.fsum(ds[lo:i])
    return out


# -- robust scaling -------------------------------------------------------------------

@dataclass
class RobustScaler:
    median: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iqr: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def fit(self, x: np.ndarray) -> "RobustScaler":
        """Type-7 quartiles per column; NaN entries (missing windows) are ignored."""
        x = np.asarray(x, dtype=np.float64)
        empty = np.all(np.isnan(x), axis=0)
        with np.errstate(all="ignore"):
            q1, med, q3 = np.nanpercentile(np.where(empty, 0.0, x), [25, 50, 75], axis=0)
        iqr = q3 - q1
        zero = iqr == 0
        if zero.any():
            log.warning("constant feature(s) %s; using unit scale", np.flatnonzero(zero).tolist())
        self.median = med
        self.iqr = np.where(zero, 1.0, iqr)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.median) / self.iqr

    def scale(self, x: np.ndarray) -> np.ndarray:
        """Transform, then impute missing entries at the training median (zero)."""
        return np.nan_to_num(self.transform(x), nan=0.0, posinf=np.inf, neginf=-np.inf)

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "iqr": self.iqr.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RobustScaler":
        return cls(np.asarray(d["median"], dtype=np.float64), np.asarray(d["iqr"], dtype=np.float64))


# -- losses ---------------------------------------------------------------------------

def gated_probability(scores: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """p = F * sigmoid(s); exactly zero wherever the gate is closed."""
    scores = np.asarray(scores, dtype=np.float64)
    gate = np.asarray(gate).astype(bool)
    return np.where(gate, expit(scores), 0.0)


def bce_loss(scores: np.ndarray, y: np.ndarray, gate: Optional[np.ndarray] = None):
    """Summed binary cross-entropy of sigmoid(scores) against targets y in [0, 1].

    Gated-out events with y = 0 have p = 0 and contribute nothing; gated-out
    events with y > 0 would have infinite loss and are excluded (counted as
    gate misses). Returns (loss, d loss / d score, gate misses).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = np.ones(len(s), dtype=bool) if gate is None else np.asarray(gate).astype(bool)
    misses = int(np.count_nonzero(~g & (y > 0)))
    loss = -(y * log_expit(s) + (1 - y) * log_expit(-s))
    grad = expit(s) - y
    loss = np.where(g, loss, 0.0)
    grad = np.where(g, grad, 0.0)
    return float(loss.sum()), grad, misses


# -- MLP ------------------------------------------------------------------------------

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _layer_norm(z, gain, bias, eps):
    mu = z.mean(axis=1, keepdims=True)
    zc = z - mu
    var = (zc * zc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    zh = zc * inv
    return zh * gain + bias, (zh, inv)


def _layer_norm_back(dy, gain, cache):
    zh, inv = cache
    dgain = (dy * zh).sum(axis=0)
    dbias = dy.sum(axis=0)
    dzh = dy * gain
    n = zh.shape[1]
    dz = inv * (dzh - dzh.mean(axis=1, keepdims=True) - zh * (dzh * zh).mean(axis=1, keepdims=True))
    return dz, dgain, dbias


PARAM_ORDER = ("W1", "b1", "g1", "c1", "W2", "b2", "g2", "c2", "w", "b")


@dataclass
class MLPConfig:
    hidden: tuple = (64, 32)
    dropout: float = 0.1
    ln_eps: float = 1e-5
    lr: float = 5e-3
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 2:
            raise ValueError("the encoder has exactly two hidden layers")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class MLP:
    """d -> h1 -> h2 -> 1 with layer norm, GELU and dropout after each hidden layer."""

    def __init__(self, n_in: int, cfg: Optional[MLPConfig] = None, seed: int = 0):
        self.cfg = cfg or MLPConfig()
        self.n_in = n_in
        h1, h2 = self.cfg.hidden
        rng = np.random.default_rng(seed)

        def glorot(a, b):
            return rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b))

        self.params = {
            "W1": glorot(n_in, h1), "b1": np.zeros(h1), "g1": np.ones(h1), "c1": np.zeros(h1),
            "W2": glorot(h1, h2), "b2": np.zeros(h2), "g2": np.ones(h2), "c2": np.zeros(h2),
            "w": glorot(h2, 1)[:, 0], "b": np.zeros(1),
        }

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None):
        """Scores for a batch. Dropout is applied only when ``rng`` is given."""
        p, cfg = self.params, self.cfg
        cache = {"x": x}
        h = x
        for k in ("1", "2"):
            z = h @ p["W" + k] + p["b" + k]
            a, ln = _layer_norm(z, p["g" + k], p["c" + k], cfg.ln_eps)
            out = gelu(a)
            mask = None
            if rng is not None and cfg.dropout > 0:
                mask = (rng.random(out.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                out = out * mask
            cache[k] = (h, a, ln, mask)
            h = out
        cache["h"] = h
        return h @ p["w"] + p["b"][0], cache

    def backward(self, dscore: np.ndarray, cache) -> dict:
        p = self.params
        grads = {"w": cache["h"].T @ dscore, "b": np.array([dscore.sum()])}
        dh = np.outer(dscore, p["w"])
        for k in ("2", "1"):
            h_in, a, ln, mask = cache[k]
            if mask is not None:
                dh = dh * mask
            da = dh * gelu_grad(a)
            dz, grads["g" + k], grads["c" + k] = _layer_norm_back(da, p["g" + k], ln)
            grads["W" + k] = h_in.T @ dz
            grads["b" + k] = dz.sum(axis=0)
            dh = dz @ p["W" + k].T
        return grads

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(x, dtype=np.float64))[0]

    def loss_and_grads(self, x, y, gate=None, rng=None):
        s, cache = self.forward(x, rng)
        loss, ds, _ = bce_loss(s, y, gate)
        return loss, self.backward(ds, cache)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def set_flat(self, v: np.ndarray):
        i = 0
        for k in PARAM_ORDER:
            n = self.params[k].size
            self.params[k] = v[i:i + n].reshape(self.params[k].shape).copy()
            i += n

    def to_dict(self) -> dict:
        return {"n_in": self.n_in, "config": asdict(self.cfg),
                "params": {k: self.params[k].ravel().tolist() for k in PARAM_ORDER},
                "shapes": {k: list(self.params[k].shape) for k in PARAM_ORDER}}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        cfg = MLPConfig(**d["config"])
        m = cls(d["n_in"], cfg)
        for k in PARAM_ORDER:
            m.params[k] = np.asarray(d["params"][k], dtype=np.float64).reshape(d["shapes"][k])
        return m


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict, lr=5e-3, weight_decay=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - self.lr * (update + self.wd * params[k])


# -- datasets and training ---------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray  # raw features, one row per event
    gate: np.ndarray
    y: np.ndarray
    split: np.ndarray  # "train" / "val" / "test"
    label: Optional[np.ndarray] = None  # binary labels for AUC when y is a soft target

    def __post_init__(self):
        if self.label is None:
            self.label = (np.asarray(self.y) > 0.5).astype(np.int64)

    def part(self, name: str) -> "Dataset":
        m = self.split == name
        return Dataset(self.x[m], self.gate[m], self.y[m], self.split[m], self.label[m])

    def __len__(self):
        return len(self.y)


def chronological_split(n: int, fractions=(0.70, 0.15, 0.15)) -> np.ndarray:
    """Split labels for n time-ordered events: first 70% train, next 15% val, rest test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to one")
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor((fractions[0] + fractions[1]) * n)) - n_train
    out = np.empty(n, dtype=object)
    out[:n_train] = "train"
    out[n_train:n_train + n_val] = "val"
    out[n_train + n_val:] = "test"
    return out


@dataclass
class TrainResult:
    model: object
    scaler: RobustScaler
    history: list
    best_epoch: int
    gate_misses: int


def _check_classes(label: np.ndarray, gate: np.ndarray):
    yy = label[gate.astype(bool)] > 0
    if yy.all() or not yy.any():
        raise ValueError("training split has a single class among gate-passing events; cannot train")


def train_mlp(data: Dataset, cfg: Optional[MLPConfig] = None, seed: int = 0) -> TrainResult:
    """AdamW on gate-passing training events; keeps the epoch with the best validation AUC."""
    cfg = cfg or MLPConfig()
    tr, va = data.part("train"), data.part("val")
    _check_classes(tr.label, tr.gate)
    scaler = RobustScaler().fit(tr.x)
    xt, xv = scaler.scale(tr.x), scaler.scale(va.x)
    _, _, misses = bce_loss(np.zeros(len(tr)), tr.y, tr.gate)
    use = tr.gate.astype(bool)
    xt, yt = xt[use], tr.y[use].astype(np.float64)
    model = MLP(xt.shape[1], cfg, seed)
    opt = AdamW(model.params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([seed, 1])
    best_auc, best_epoch, best = -np.inf, -1, model.flat()
    history = []
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(yt))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            s, cache = model.forward(xt[idx], rng)
            loss, ds, _ = bce_loss(s, yt[idx])
            grads = model.backward(ds / len(idx), cache)
            opt.step(model.params, grads)
            total += loss
        train_loss = total / max(1, len(yt))
        sv = model.scores(xv)
        val_loss = bce_loss(sv, va.y, va.gate)[0] / max(1, int(va.gate.astype(bool).sum()))
        val_auc = auc_score(gated_probability(sv, va.gate), va.label)
        train_auc = auc_score(expit(model.scores(xt)), tr.label[use])
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "train_auc": train_auc, "val_auc": val_auc})
        score = -np.inf if val_auc is None else val_auc
        if score > best_auc:
            best_auc, best_epoch, best = score, epoch, model.flat()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.set_flat(best)
    return TrainResult(model, scaler, history, best_epoch, misses)


# -- random Fourier feature baseline -------------------------------------------------------

def median_pairwise_distance(x: np.ndarray, max_points: int = 2000) -> float:
    x = np.asarray(x, dtype=np.float64)[:max_points]
    if len(x) < 2:
        return 1.0
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), 1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


class RandomFourierFeatures:
    """phi(x) = sqrt(1/m) [cos(x W), sin(x W)], W ~ N(0, 1/bandwidth^2), m = n_features / 2.

    The paired form approximates the RBF kernel with lower variance than
    the single-cosine form with random phases.
    """

    def __init__(self, n_in: int, n_features: int, bandwidth: float, seed: int = 0):
        if n_features % 2:
            raise ValueError("n_features must be even (cosine/sine pairs)")
        rng = np.random.default_rng([seed, 2])
        self.bandwidth = float(bandwidth)
        self.w = rng.normal(0.0, 1.0 / bandwidth, size=(n_in, n_features // 2))
        self.n_features = n_features

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.n_features == 0:
            return np.zeros((len(x), 0))
        proj = np.asarray(x) @ self.w
        return math.sqrt(2.0 / self.n_features) * np.hstack([np.cos(proj), np.sin(proj)])


@dataclass
class RFFConfig:
    n_features: int = 256
    l2: float = 1e-3
    max_iter: int = 2000


class LogisticModel:
    """Logistic regression on fixed features, fit by L-BFGS on the penalised mean log-loss."""

    def __init__(self, features, coef: Optional[np.ndarray] = None, intercept: float = 0.0):
        self.features = features
        self.coef = coef
        self.intercept = intercept

    def fit(self, x: np.ndarray, y: np.ndarray, l2: float = 1e-3, max_iter: int = 2000) -> "LogisticModel":
        z = self.features(x)
        n, d = z.shape
        y = np.asarray(y, dtype=np.float64)

        def fun(theta):
            w, b = theta[:d], theta[d]
            s = z @ w + b
            loss, ds, _ = bce_loss(s, y)
            g = np.empty(d + 1)
            g[:d] = z.T @ ds / n + l2 * w
            g[d] = ds.sum() / n
            return loss / n + 0.5 * l2 * float(w @ w), g

        res = minimize(fun, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-15})
        self.coef, self.intercept = res.x[:d], float(res.x[d])
        return self

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.coef + self.intercept


def identity_features(x):
    return np.asarray(x, dtype=np.float64)


def train_rff(data: Dataset, cfg: Optional[RFFConfig] = None, seed: int = 0) -> TrainResult:
    cfg = cfg or RFFConfig()
    tr = data.part("train")
    _check_classes(tr.label, tr.gate)
    scaler = RobustScaler().fit(tr.x)
    _, _, misses = bce_loss(np.zeros(len(tr)), tr.y, tr.gate)
    use = tr.gate.astype(bool)
    xt, yt = scaler.scale(tr.x)[use], tr.y[use]
    rff = RandomFourierFeatures(xt.shape[1], cfg.n_features, median_pairwise_distance(xt), seed)
    model = LogisticModel(rff).fit(xt, yt, cfg.l2, cfg.max_iter)
    return TrainResult(model, scaler, [], -1, misses)


def predict(result: TrainResult, x: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Gated probabilities for raw (unscaled) features; NaN marks a missing window."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isinf(x)):
        raise ValueError("infinite features cannot be scored")
    return gated_probability(result.model.scores(result.scaler.scale(x)), gate)
