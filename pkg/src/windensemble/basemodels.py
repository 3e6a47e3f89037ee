"""
Base forecasters
================

A pool of small, independent one-step forecasters sharing one interface:

``persistence``
    Repeats the last observed value.
``autoregressive``
    AR(p) with intercept fitted by ordinary least squares.
``boosted_stumps``
    Gradient boosting of depth-1 regression trees on the lagged window.
``recurrent``
    Single-layer gated recurrent cell with a linear readout.
``graph_regressor``
    Dilated-conv encoder + message passing over the farm graph + linear head.

All non-graph models are fitted on the pooled windows of every farm.
"""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import embedding as emb
from .data import WindFarmGraph, WindowSample
from .errors import DimensionError, WindEnsembleError

logger = logging.getLogger(__name__)

KINDS = ("persistence", "autoregressive", "boosted_stumps", "recurrent", "graph_regressor")


class SingularFitError(WindEnsembleError):
    """The least-squares design matrix is rank deficient."""


@dataclass(frozen=True)
class BaseModelSpec:
    kind: str
    p: int = 3
    rounds: int = 100
    depth: int = 1
    shrinkage: float = 0.1
    hidden_dim: int = 16
    gnn_layers: int = 1
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 3e-3
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WindEnsembleError(f"unknown base model kind {self.kind!r}; expected one of {KINDS}")
        if self.p < 1:
            raise WindEnsembleError("autoregressive order p must be >= 1")
        if self.rounds < 1:
            raise WindEnsembleError("boosting rounds must be >= 1")
        if self.depth != 1:
            raise WindEnsembleError("only depth-1 stumps are supported")
        if not 0.0 < self.shrinkage <= 1.0:
            raise WindEnsembleError("shrinkage must lie in (0, 1]")
        if self.hidden_dim < 1:
            raise WindEnsembleError("hidden_dim must be >= 1")
        if self.gnn_layers < 0 or self.epochs < 1 or self.batch_size < 1:
            raise WindEnsembleError("gnn_layers >= 0, epochs >= 1 and batch_size >= 1 required")

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind == "autoregressive":
            return f"ar{self.p}"
        return self.kind

    def to_dict(self):
        return asdict(self)


@dataclass
class FittedBase:
    spec: BaseModelSpec
    window: int
    params: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    embedding_cfg: emb.EmbeddingConfig | None = None

    @property
    def needs_graph(self):
        return self.spec.kind == "graph_regressor"

    @property
    def name(self):
        return self.spec.label


@dataclass
class WindowSet:
    """Column form of many :class:`WindowSample` objects."""

    X: np.ndarray
    y: np.ndarray
    t_index: np.ndarray
    farm: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample]):
        if not samples:
            raise WindEnsembleError("no training samples")
        W = len(samples[0].window)
        for s in samples:
            if len(s.window) != W:
                raise DimensionError("window length", W, len(s.window))
        return cls(np.stack([s.window for s in samples]).astype(float),
                   np.array([s.target for s in samples], float),
                   np.array([s.t_index for s in samples], np.int64),
                   np.array([s.farm_id for s in samples]))

    def __len__(self):
        return len(self.y)

    def by_time(self, farm_ids):
        """(n_farms, T, W) windows and (n_farms, T) targets on steps shared by every farm."""
        common = None
        for f in farm_ids:
            t = set(self.t_index[self.farm == f].tolist())
            common = t if common is None else common & t
        steps = np.array(sorted(common or ()), np.int64)
        Xs, ys = [], []
        for f in farm_ids:
            mask = self.farm == f
            pos = {int(t): i for i, t in zip(np.flatnonzero(mask), self.t_index[mask])}
            rows = [pos[int(t)] for t in steps]
            Xs.append(self.X[rows])
            ys.append(self.y[rows])
        return np.stack(Xs), np.stack(ys), steps


# ---------------------------------------------------------------- fitting

def _fit_ar(X, y, p):
    if X.shape[1] < p:
        raise DimensionError("autoregressive window", p, X.shape[1])
    lags = X[:, ::-1][:, :p]  # column j is lag j+1
    A = np.column_stack([np.ones(len(y)), lags])
    if len(y) < p + 1:
        raise SingularFitError(f"AR({p}) needs at least {p + 1} samples, got {len(y)}; try a smaller p")
    beta, _, rank, sv = np.linalg.lstsq(A, y, rcond=None)
    if rank < p + 1 or sv[-1] <= sv[0] * 1e-10:
        raise SingularFitError(f"AR({p}) least-squares system is singular (rank {rank} < {p + 1}); "
                               f"try a smaller p")
    resid = A @ beta - y
    return {"intercept": float(beta[0]), "coef": beta[1:].astype(float)}, float(np.mean(resid ** 2))


def _best_stump(Xs, order, res):
    """Best single split over all features for residuals ``res``.

    ``Xs`` holds each column sorted, ``order`` the matching row indices.
    Returns (feature, threshold, left_value, right_value, sse_reduction).
    """
    n = len(res)
    R = res[order]
    cs = np.cumsum(R, axis=0)[:-1]
    total = res.sum()
    nl = np.arange(1, n)[:, None].astype(float)
    gain = cs ** 2 / nl + (total - cs) ** 2 / (n - nl) - total ** 2 / n
    gain = np.where(Xs[:-1] < Xs[1:], gain, -np.inf)
    if n < 2 or not np.isfinite(gain).any():
        m = total / n
        return 0, np.inf, m, m, 0.0
    i, j = np.unravel_index(np.argmax(gain), gain.shape)
    thr = 0.5 * (Xs[i, j] + Xs[i + 1, j])
    left = cs[i, j] / (i + 1)
    right = (total - cs[i, j]) / (n - i - 1)
    return int(j), float(thr), float(left), float(right), float(gain[i, j])


def _fit_stumps(X, y, rounds, shrinkage):
    init = float(np.mean(y))
    F = np.full(len(y), init)
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    feats, thrs, lefts, rights, losses = [], [], [], [], [float(np.mean((y - F) ** 2))]
    for _ in range(rounds):
        res = y - F
        j, thr, left, right, _ = _best_stump(Xs, order, res)
        lv, rv = shrinkage * left, shrinkage * right
        F = F + np.where(X[:, j] <= thr, lv, rv)
        feats.append(j)
        thrs.append(thr)
        lefts.append(lv)
        rights.append(rv)
        losses.append(float(np.mean((y - F) ** 2)))
    return ({"init": init, "feature": np.array(feats, np.int64), "threshold": np.array(thrs),
             "left": np.array(lefts), "right": np.array(rights)}, losses)


def _predict_stumps(params, X):
    X = np.atleast_2d(X)
    out = np.full(len(X), params["init"])
    for j, thr, lv, rv in zip(params["feature"], params["threshold"], params["left"], params["right"]):
        out = out + np.where(X[:, j] <= thr, lv, rv)
    return out


def init_recurrent(hidden, rng):
    blocks = {}
    for gate in ("z", "r", "n"):
        blocks.update(dc.init_linear(rng, 1, hidden, f"x{gate}."))
        blocks[f"h{gate}.W"] = dc.init_linear(rng, hidden, hidden, "tmp.")["tmp.W"]
    blocks.update(dc.init_linear(rng, hidden, 1, "out."))
    return dc.ParamSet(blocks)


def tape_recurrent(p, X):
    """Gated recurrent cell over the window; X has shape (B, W)."""
    B, W = X.shape
    hidden = p["hz.W"].value.shape[0]
    tape = p["out.W"].tape
    h = tape.constant(np.zeros((B, hidden)))
    for t in range(W):
        x = X[:, t:t + 1]
        z = dc.sigmoid(dc.add(dc.linear(x, p["xz.W"], p["xz.b"]), dc.linear(h, p["hz.W"])))
        r = dc.sigmoid(dc.add(dc.linear(x, p["xr.W"], p["xr.b"]), dc.linear(h, p["hr.W"])))
        n = dc.tanh(dc.add(dc.linear(x, p["xn.W"], p["xn.b"]), dc.mul(r, dc.linear(h, p["hn.W"]))))
        h = dc.add(dc.mul(dc.sub(1.0, z), n), dc.mul(z, h))
    y = dc.linear(h, p["out.W"], p["out.b"])
    return dc.reshape(y, (B,))


def _fit_recurrent(X, y, spec, seed, patience=4):
    rng = np.random.default_rng(seed)
    p = init_recurrent(spec.hidden_dim, rng)
    opt = dc.Optimizer(dc.OptimConfig(spec.learning_rate))
    best, stale, history = np.inf, 0, []
    for _ in range(spec.epochs):
        total = 0.0
        for idx in emb._minibatches(len(y), spec.batch_size, rng):
            tape = dc.Tape()
            v = tape.params(p)
            loss = dc.mean(dc.square(dc.sub(tape_recurrent(v, X[idx]), y[idx])))
            p = opt.step(p, dc.backward(tape, loss))
            total += float(loss.value) * len(idx)
        history.append(total / len(y))
        if history[-1] < best * (1 - 1e-3):
            best, stale = history[-1], 0
        else:
            stale += 1
            if stale >= patience:
                break
    return p, history


def fit_base(spec: BaseModelSpec, train, graph: WindFarmGraph | None = None, seed=0,
             embedding_cfg: emb.EmbeddingConfig | None = None) -> FittedBase:
    """Fit one base model on pooled training windows.

    ``train`` is a list of :class:`WindowSample` or a :class:`WindowSet`.
    A graph is required for (and only for) ``graph_regressor``.
    """
    ws = train if isinstance(train, WindowSet) else WindowSet.from_samples(list(train))
    if len(ws) == 0:
        raise WindEnsembleError("empty training set")
    if spec.kind == "graph_regressor" and graph is None:
        raise WindEnsembleError("graph_regressor requires a farm graph")
    if spec.kind != "graph_regressor" and graph is not None:
        raise WindEnsembleError(f"{spec.kind} does not take a farm graph")
    W = ws.X.shape[1]
    if spec.kind == "persistence":
        return FittedBase(spec, W, {}, {"final_loss": float(np.mean((ws.X[:, -1] - ws.y) ** 2)), "iterations": 0})
    if spec.kind == "autoregressive":
        params, mse = _fit_ar(ws.X, ws.y, spec.p)
        return FittedBase(spec, W, params, {"final_loss": mse, "iterations": 1})
    if spec.kind == "boosted_stumps":
        params, losses = _fit_stumps(ws.X, ws.y, spec.rounds, spec.shrinkage)
        return FittedBase(spec, W, params, {"final_loss": losses[-1], "iterations": spec.rounds,
                                            "loss_history": losses})
    if spec.kind == "recurrent":
        p, history = _fit_recurrent(ws.X, ws.y, spec, seed)
        return FittedBase(spec, W, {"net": p}, {"final_loss": history[-1], "iterations": len(history),
                                                 "loss_history": history})
    cfg = embedding_cfg or emb.EmbeddingConfig(window=W)
    if cfg.window != W or cfg.gnn_layers != spec.gnn_layers:
        from dataclasses import replace
        cfg = replace(cfg, window=W, gnn_layers=spec.gnn_layers)
    X, y, _ = ws.by_time(graph.farm_ids)
    p, summary = emb.fit_graph_regressor(X, y, graph, cfg, seed=seed, epochs=spec.epochs,
                                         batch_size=spec.batch_size, learning_rate=spec.learning_rate)
    return FittedBase(spec, W, {"net": p}, summary, cfg)


# ---------------------------------------------------------------- prediction

def predict_windows(model: FittedBase, X, graph: WindFarmGraph | None = None):
    """Vectorized forecasts.

    Non-graph models take ``X`` of shape (B, W) and return (B,). The graph
    regressor takes (n_farms, B, W) in graph node order and returns (n_farms, B).
    """
    X = np.asarray(X, float)
    if X.shape[-1] != model.window:
        raise DimensionError(f"{model.name} window length", model.window, X.shape[-1])
    kind = model.spec.kind
    if kind == "graph_regressor":
        if graph is None:
            raise WindEnsembleError("graph_regressor prediction needs the farm graph")
        if X.ndim != 3 or X.shape[0] != graph.n:
            raise DimensionError("graph_regressor farms", graph.n, X.shape[0] if X.ndim == 3 else 0)
        return emb.predict_graph_regressor(model.params["net"], X, graph, model.embedding_cfg)
    X2 = np.atleast_2d(X)
    if kind == "persistence":
        return X2[:, -1].copy()
    if kind == "autoregressive":
        p = model.params
        lags = X2[:, ::-1][:, :len(p["coef"])]
        return p["intercept"] + lags @ p["coef"]
    if kind == "boosted_stumps":
        return _predict_stumps(model.params, X2)
    tape = dc.Tape()
    return tape_recurrent(tape.params(model.params["net"]), X2).value


def predict_base(model: FittedBase, sample: WindowSample, graph_context=None, graph=None):
    """One forecast on the normalized scale.

    For the graph regressor ``graph_context`` maps every farm_id to its window
    at the sample's step and ``graph`` is the farm graph.
    """
    window = np.asarray(sample.window, float)
    if window.shape != (model.window,):
        raise DimensionError(f"{model.name} window length", model.window, window.shape[-1])
    if model.needs_graph:
        if graph_context is None or graph is None:
            raise WindEnsembleError("graph_regressor prediction needs graph_context and graph")
        ctx = dict(graph_context)
        ctx[sample.farm_id] = window
        X = emb._stack_windows(graph, ctx)[:, None, :]
        return float(predict_windows(model, X, graph)[graph.index(sample.farm_id), 0])
    return float(predict_windows(model, window[None, :])[0])


def predict_pool(pool: Sequence[FittedBase], X_by_farm, graph: WindFarmGraph | None = None):
    """Forecast matrix (n_farms, T, N) for aligned windows (n_farms, T, W)."""
    X = np.asarray(X_by_farm, float)
    out = np.empty(X.shape[:2] + (len(pool),))
    for i, m in enumerate(pool):
        if m.needs_graph:
            out[:, :, i] = predict_windows(m, X, graph)
        else:
            out[:, :, i] = predict_windows(m, X.reshape(-1, X.shape[-1])).reshape(X.shape[:2])
    return out


# ---------------------------------------------------------------- loss bookkeeping

class LossHistory:
    """Ring of the most recent ``horizon`` per-model loss rows for one farm."""

    def __init__(self, n_models, horizon=16, squared=False):
        if n_models < 1 or horizon < 1:
            raise WindEnsembleError("LossHistory needs n_models >= 1 and horizon >= 1")
        self.n_models = n_models
        self.horizon = horizon
        self.squared = squared
        self._rows = deque(maxlen=horizon)

    def __len__(self):
        return len(self._rows)

    def append(self, losses):
        row = np.asarray(losses, float)
        if row.shape != (self.n_models,):
            raise DimensionError("loss row", self.n_models, row.shape[-1] if row.ndim else 0)
        if np.any(row < 0) or not np.all(np.isfinite(row)):
            raise WindEnsembleError("losses must be finite and non-negative")
        self._rows.append(row.copy())

    def rows(self):
        """Retained rows, oldest first, shape (len, N)."""
        if not self._rows:
            return np.zeros((0, self.n_models))
        return np.stack(list(self._rows))

    def matrix(self):
        """Retained rows zero-padded at the top to shape (horizon, N)."""
        r = self.rows()
        return np.concatenate([np.zeros((self.horizon - len(r), self.n_models)), r])

    def snapshot(self):
        return self.rows().copy()


def record_losses(pool: Sequence[FittedBase], sample: WindowSample, truth, history: LossHistory,
                  graph_context=None, graph=None):
    """Append every model's loss on ``sample`` against ``truth``; returns ``history``."""
    if len(pool) != history.n_models:
        raise DimensionError("pool size vs loss history", history.n_models, len(pool))
    forecasts = np.array([predict_base(m, sample, graph_context, graph) for m in pool])
    err = forecasts - float(truth)
    history.append(err * err if history.squared else np.abs(err))
    return history


# ---------------------------------------------------------------- checkpoints

def save_base(model: FittedBase, path):
    """Neural models use the ParamSet format with a spec header; others plain JSON."""
    header = {"format": "windensemble.base/1", "spec": model.spec.to_dict(), "window": model.window,
              "summary": {k: v for k, v in model.summary.items() if k in ("final_loss", "iterations")}}
    if model.spec.kind in ("recurrent", "graph_regressor"):
        if model.embedding_cfg is not None:
            header["embedding_cfg"] = asdict(model.embedding_cfg)
        dc.save_params(path, model.params["net"], meta=header)
        return
    params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in model.params.items()}
    header["params"] = params
    with open(path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_base(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"WEPS":
        net, header = dc.load_params(path)
        cfg = header.get("embedding_cfg")
        if cfg is not None:
            cfg["dilations"] = tuple(cfg["dilations"])
            cfg = emb.EmbeddingConfig(**cfg)
        return FittedBase(BaseModelSpec(**header["spec"]), header["window"], {"net": net},
                          header["summary"], cfg)
    with open(path) as fh:
        header = json.load(fh)
    spec = BaseModelSpec(**header["spec"])
    raw = header["params"]
    params = {}
    for k, v in raw.items():
        if isinstance(v, list):
            params[k] = np.array(v, dtype=np.int64 if k == "feature" else float)
        else:
            params[k] = v
    return FittedBase(spec, header["window"], params, header["summary"])
