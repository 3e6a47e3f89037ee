"""
State embeddings for the ensemble agent
=======================================

Each farm's state at a decision step is the concatenation of

* a spatio-temporal part: every farm's recent window is compressed by a
  stack of dilated convolutions, then one or more message-passing layers
  mix in the neighbors' compressed windows over the farm graph;
* a model-loss part: the recent absolute losses of every base model on that
  farm, compressed by a small network.

Functions prefixed with ``tape_`` build the computation on a
:class:`~windensemble.diffcore.Tape` (used for training and gradient
checks). The public functions without the prefix take plain arrays and a
:class:`~windensemble.diffcore.ParamSet` and return arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .data import WindFarmGraph
from .errors import DimensionError, SequenceTooShortError, WindEnsembleError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingConfig:
    window: int = 24
    channels: int = 8
    kernel_size: int = 2
    dilations: tuple = (1, 2, 4)
    stse_dim: int = 16
    gnn_layers: int = 1
    loss_horizon: int = 16
    mle_hidden: int = 16
    mle_dim: int = 8
    mle_mode: str = "mlp"  # or "dilated_cnn"

    def __post_init__(self):
        if self.mle_mode not in ("mlp", "dilated_cnn"):
            raise WindEnsembleError(f"unknown mle_mode {self.mle_mode!r}")
        if self.window < self.receptive_field:
            raise SequenceTooShortError("window vs encoder receptive field", self.receptive_field, self.window)
        if self.mle_mode == "dilated_cnn" and self.loss_horizon < self.receptive_field:
            raise SequenceTooShortError("loss_horizon vs loss encoder receptive field",
                                        self.receptive_field, self.loss_horizon)
        if self.gnn_layers < 0 or self.mle_dim < 0:
            raise WindEnsembleError("gnn_layers and mle_dim must be >= 0")

    @property
    def receptive_field(self):
        return dc.receptive_field([self.kernel_size] * len(self.dilations), self.dilations)

    @property
    def state_dim(self):
        return self.stse_dim + self.mle_dim


@dataclass(frozen=True)
class GnnLayerParams:
    """Message block (W_msg, b_msg) and update block (W_upd, b_upd) of layer ``index``.

    The update block acts on ``[aggregate || own message]`` so its input
    width is twice the message width.
    """

    msg_W: np.ndarray
    msg_b: np.ndarray
    upd_W: np.ndarray
    upd_b: np.ndarray
    index: int = 0

    def __post_init__(self):
        d = self.msg_W.shape[0]
        if self.upd_W.shape[1] != 2 * d:
            raise DimensionError(f"gnn layer {self.index} update input", 2 * d, self.upd_W.shape[1])

    @classmethod
    def from_params(cls, params: Mapping, index):
        pre = f"gnn{index}."
        return cls(np.asarray(params[pre + "msg.W"]), np.asarray(params[pre + "msg.b"]),
                   np.asarray(params[pre + "upd.W"]), np.asarray(params[pre + "upd.b"]), index)

    def blocks(self):
        pre = f"gnn{self.index}."
        return {pre + "msg.W": self.msg_W, pre + "msg.b": self.msg_b,
                pre + "upd.W": self.upd_W, pre + "upd.b": self.upd_b}


@dataclass(frozen=True)
class StateEmbedding:
    stse: np.ndarray
    mle: np.ndarray
    farm_id: str
    t_index: int

    @property
    def vector(self):
        return np.concatenate([np.asarray(self.stse, float), np.asarray(self.mle, float)])

    def __len__(self):
        return len(self.stse) + len(self.mle)


# ---------------------------------------------------------------- initialization

def init_stse_params(cfg: EmbeddingConfig, rng: np.random.Generator, readout=True):
    """Encoder, GNN layers and (optionally) a scalar readout head."""
    blocks = {}
    c_in = 1
    for i, _ in enumerate(cfg.dilations):
        blocks.update(dc.init_conv(rng, c_in, cfg.channels, cfg.kernel_size, f"enc.conv{i}."))
        c_in = cfg.channels
    blocks.update(dc.init_linear(rng, cfg.channels, cfg.stse_dim, "enc.proj."))
    d = cfg.stse_dim
    for l in range(cfg.gnn_layers):
        blocks.update(dc.init_linear(rng, d, d, f"gnn{l}.msg."))
        blocks.update(dc.init_linear(rng, 2 * d, d, f"gnn{l}.upd."))
    if readout:
        blocks.update(dc.init_linear(rng, d, 1, "head."))
        skip = np.zeros((1, cfg.window))
        skip[0, -1] = 1.0  # start from persistence
        blocks["skip.W"] = skip
    return dc.ParamSet(blocks)


def init_mle_params(cfg: EmbeddingConfig, n_models, rng: np.random.Generator, head=True):
    blocks = {"input_scale": np.array(1.0)}
    if cfg.mle_dim == 0:
        return dc.ParamSet(blocks)
    if cfg.mle_mode == "mlp":
        blocks.update(dc.init_mlp(rng, [cfg.loss_horizon * n_models, cfg.mle_hidden, cfg.mle_dim], "mlp."))
    else:
        c_in = n_models
        for i, _ in enumerate(cfg.dilations):
            blocks.update(dc.init_conv(rng, c_in, cfg.mle_hidden, cfg.kernel_size, f"conv{i}."))
            c_in = cfg.mle_hidden
        blocks.update(dc.init_linear(rng, cfg.mle_hidden, cfg.mle_dim, "proj."))
    if head:
        blocks.update(dc.init_linear(rng, cfg.mle_dim, n_models, "head."))
    return dc.ParamSet(blocks)


# ---------------------------------------------------------------- temporal encoder

def _n_conv(p):
    n = 0
    while f"enc.conv{n}.K" in p:
        n += 1
    return n


def tape_encoder_features(p, windows, cfg: EmbeddingConfig):
    """Last dilated-conv activation map, shape (..., channels, L_out)."""
    x = windows if isinstance(windows, dc.Var) else None
    wv = windows.value if x is not None else np.asarray(windows, float)
    if wv.shape[-1] < cfg.receptive_field:
        raise SequenceTooShortError("encoder window", cfg.receptive_field, wv.shape[-1])
    lead = wv.shape[:-1]
    tape = p["enc.proj.W"].tape
    h = dc.reshape(x, (-1, 1, wv.shape[-1])) if x is not None else tape.constant(wv.reshape(-1, 1, wv.shape[-1]))
    for i, d in enumerate(cfg.dilations):
        h = dc.tanh(dc.conv1d_dilated(h, p[f"enc.conv{i}.K"], d, p[f"enc.conv{i}.b"]))
    return h, lead


def tape_encode(p, windows, cfg: EmbeddingConfig):
    h, lead = tape_encoder_features(p, windows, cfg)
    pooled = dc.mean(h, axis=-1)
    z = dc.linear(pooled, p["enc.proj.W"], p["enc.proj.b"])
    return dc.reshape(z, lead + (cfg.stse_dim,))


def encode_temporal(window, encoder: dc.ParamSet, cfg: EmbeddingConfig = EmbeddingConfig()):
    """Compress window(s) of shape (..., W) to (..., stse_dim)."""
    tape = dc.Tape()
    return tape_encode(tape.params(encoder), window, cfg).value


def encoder_features(window, encoder: dc.ParamSet, cfg: EmbeddingConfig = EmbeddingConfig()):
    """Pre-pooling activation map of the encoder, (..., channels, L_out)."""
    tape = dc.Tape()
    h, lead = tape_encoder_features(tape.params(encoder), window, cfg)
    return h.value.reshape(lead + h.value.shape[-2:])


# ---------------------------------------------------------------- message passing

def tape_message(p, h, layer):
    pre = f"gnn{layer}."
    return dc.tanh(dc.linear(h, p[pre + "msg.W"], p[pre + "msg.b"]))


def tape_update(p, a, m, layer):
    pre = f"gnn{layer}."
    return dc.tanh(dc.linear(dc.concat([a, m], axis=-1), p[pre + "upd.W"], p[pre + "upd.b"]))


def tape_gnn(p, h0, agg_matrix, n_layers):
    """Synchronous message passing; node axis is the leading axis of ``h0``."""
    h = h0
    for l in range(n_layers):
        m = tape_message(p, h, l)
        a = dc.aggregate(m, agg_matrix)
        h = tape_update(p, a, m, l)
    return h


def message_compute(h_u, layer: GnnLayerParams):
    h_u = np.asarray(h_u, float)
    if h_u.shape[-1] != layer.msg_W.shape[1]:
        raise DimensionError(f"gnn layer {layer.index} message input", layer.msg_W.shape[1], h_u.shape[-1])
    return np.tanh(h_u @ layer.msg_W.T + layer.msg_b)


def message_aggregate(messages: Sequence, dim=None):
    """Elementwise mean of neighbor messages; zero vector for no neighbors.

    Values are sorted per coordinate before summing, so the result is
    bit-identical under any ordering of ``messages``.
    """
    msgs = [np.asarray(m, float) for m in messages]
    if not msgs:
        if dim is None:
            raise WindEnsembleError("aggregating an empty neighborhood needs an explicit dim")
        return np.zeros(dim)
    d = msgs[0].shape
    for m in msgs[1:]:
        if m.shape != d:
            raise DimensionError("message_aggregate ragged messages", d[-1], m.shape[-1])
    if dim is not None and d[-1] != dim:
        raise DimensionError("message_aggregate", dim, d[-1])
    return np.mean(np.sort(np.stack(msgs), axis=0), axis=0)


def message_update(a_v, m_v, layer: GnnLayerParams):
    a_v, m_v = np.asarray(a_v, float), np.asarray(m_v, float)
    d = layer.msg_W.shape[0]
    for name, v in (("aggregate", a_v), ("own message", m_v)):
        if v.shape[-1] != d:
            raise DimensionError(f"gnn layer {layer.index} update {name}", d, v.shape[-1])
    return np.tanh(np.concatenate([a_v, m_v], axis=-1) @ layer.upd_W.T + layer.upd_b)


def gnn_forward(graph: WindFarmGraph, initial, layers: Sequence[GnnLayerParams]):
    """Apply compute -> aggregate -> update for every layer, all nodes at once.

    ``initial`` is an array with the node axis first (graph node order) or a
    mapping ``farm_id -> hidden vector``; the result has the same form.
    """
    as_map = isinstance(initial, Mapping)
    if as_map:
        missing = [f for f in graph.farm_ids if f not in initial]
        if missing:
            raise WindEnsembleError(f"initial state missing node(s) {missing}")
        h = np.stack([np.asarray(initial[f], float) for f in graph.farm_ids])
    else:
        h = np.asarray(initial, float)
        if h.shape[0] != graph.n:
            raise DimensionError("gnn_forward node axis", graph.n, h.shape[0])
    for layer in layers:
        m = message_compute(h, layer)
        a = np.stack([message_aggregate([m[u] for u in graph.edges[v]], dim=m.shape[-1])
                      if graph.edges[v] else np.zeros(m.shape[1:]) for v in range(graph.n)])
        h = message_update(a, m, layer)
    if as_map:
        return {f: h[i] for i, f in enumerate(graph.farm_ids)}
    return h


def gnn_layers_from(params: Mapping, n_layers):
    return [GnnLayerParams.from_params(params, l) for l in range(n_layers)]


# ---------------------------------------------------------------- spatio-temporal embedding

def _stack_windows(graph, windows):
    if isinstance(windows, Mapping):
        missing = [f for f in graph.farm_ids if f not in windows]
        if missing:
            raise WindEnsembleError(f"missing window for farm(s) {missing}")
        return np.stack([np.asarray(windows[f], float) for f in graph.farm_ids])
    arr = np.asarray(windows, float)
    if arr.shape[0] != graph.n:
        raise WindEnsembleError(f"expected windows for {graph.n} farms, got {arr.shape[0]}")
    return arr


def tape_stse(p, windows, agg_matrix, cfg: EmbeddingConfig):
    h0 = tape_encode(p, windows, cfg)
    return tape_gnn(p, h0, agg_matrix, cfg.gnn_layers)


def compute_stse(graph: WindFarmGraph, windows, params: dc.ParamSet, cfg: EmbeddingConfig = EmbeddingConfig()):
    """Per-farm spatio-temporal embedding.

    ``windows`` maps farm_id -> window (or an array with the node axis first;
    extra batch axes are allowed). Returns the same form.
    """
    X = _stack_windows(graph, windows)
    tape = dc.Tape()
    out = tape_stse(tape.params(params), X, graph.mean_aggregation_matrix(), cfg).value
    if isinstance(windows, Mapping):
        return {f: out[i] for i, f in enumerate(graph.farm_ids)}
    return out


def tape_regress(p, windows, agg_matrix, cfg):
    """Graph-aware one-step regression: linear head on the STSE plus a linear
    skip from the farm's own raw window (mean pooling alone blurs the most
    recent value)."""
    z = tape_stse(p, windows, agg_matrix, cfg)
    y = dc.linear(z, p["head.W"], p["head.b"])
    if "skip.W" in p:
        x = windows if isinstance(windows, dc.Var) else p["skip.W"].tape.constant(np.asarray(windows, float))
        y = dc.add(y, dc.linear(x, p["skip.W"]))
    return dc.reshape(y, y.value.shape[:-1])


# ---------------------------------------------------------------- model-loss embedding

def loss_blocks(losses, horizon, lag=1):
    """Sliding loss-history inputs.

    ``losses`` has shape (T, N): row ``t`` is every base model's loss on the
    sample decided at step ``t``. Block ``t`` holds rows ``t-lag-H+1 .. t-lag``
    (oldest first); rows before the start are zero. With ``lag`` equal to the
    forecast horizon only losses whose truth is already observed are used.
    """
    L = np.asarray(losses, float)
    T, N = L.shape
    padded = np.concatenate([np.zeros((horizon + lag, N)), L])
    idx = np.arange(T)[:, None] + np.arange(horizon)[None, :] + 1
    return padded[idx]


def _history_matrix(history, horizon, n_models=None):
    m = history.matrix() if hasattr(history, "matrix") else np.asarray(history, float)
    if m.ndim != 2 or m.shape[0] == 0:
        raise WindEnsembleError("loss history holds no complete row")
    if n_models is not None and m.shape[1] != n_models:
        raise DimensionError("loss history models", n_models, m.shape[1])
    if m.shape[0] > horizon:
        m = m[-horizon:]
    if m.shape[0] < horizon:
        m = np.concatenate([np.zeros((horizon - m.shape[0], m.shape[1])), m])
    return m


def tape_mle(p, blocks, cfg: EmbeddingConfig):
    """``blocks`` has shape (..., H, N)."""
    bv = blocks.value if isinstance(blocks, dc.Var) else np.asarray(blocks, float)
    tape = p["input_scale"].tape
    x = blocks if isinstance(blocks, dc.Var) else tape.constant(bv)
    x = dc.mul(x, p["input_scale"].value)  # fixed scale, not trained
    lead = bv.shape[:-2]
    if cfg.mle_mode == "mlp":
        flat = dc.reshape(x, lead + (bv.shape[-2] * bv.shape[-1],))
        return dc.tanh(dc.mlp(p, flat, 2, "mlp."))
    h = dc.reshape(x, (-1,) + bv.shape[-2:])
    # (B, H, N) -> channels are models: move model axis before time
    h = _swap_last_two(h)
    for i, d in enumerate(cfg.dilations):
        h = dc.tanh(dc.conv1d_dilated(h, p[f"conv{i}.K"], d, p[f"conv{i}.b"]))
    z = dc.tanh(dc.linear(dc.mean(h, axis=-1), p["proj.W"], p["proj.b"]))
    return dc.reshape(z, lead + (cfg.mle_dim,))


def _swap_last_two(x):
    v = x.value
    return x.tape.record(np.swapaxes(v, -1, -2).copy(), [(x, lambda g: np.swapaxes(g, -1, -2))])


def compute_mle(history, mlp: dc.ParamSet, cfg: EmbeddingConfig = EmbeddingConfig()):
    """Compress the most recent ``H`` loss rows (zero-padded) to ``mle_dim`` values.

    ``history`` is a :class:`~windensemble.basemodels.LossHistory` or an
    array of rows (oldest first) with shape (rows, N).
    """
    if cfg.mle_dim == 0:
        _history_matrix(history, cfg.loss_horizon)
        return np.zeros(0)
    n_models = _mle_models(mlp, cfg)
    m = _history_matrix(history, cfg.loss_horizon, n_models)
    tape = dc.Tape()
    return tape_mle(tape.params(mlp), m, cfg).value


def compute_mle_batch(blocks, mlp: dc.ParamSet, cfg: EmbeddingConfig = EmbeddingConfig()):
    blocks = np.asarray(blocks, float)
    if cfg.mle_dim == 0:
        return np.zeros(blocks.shape[:-2] + (0,))
    tape = dc.Tape()
    return tape_mle(tape.params(mlp), blocks, cfg).value


def _mle_models(p, cfg):
    if cfg.mle_mode == "mlp":
        return p["mlp.0.W"].shape[1] // cfg.loss_horizon
    return p["conv0.K"].shape[1]


def build_state(stse, mle, farm_id, t_index):
    """Splice the two parts, spatio-temporal first."""
    if stse is None or mle is None:
        raise WindEnsembleError("build_state needs both parts (use an empty array to ablate one)")
    return StateEmbedding(np.asarray(stse, float).copy(), np.asarray(mle, float).copy(), farm_id, int(t_index))


# ---------------------------------------------------------------- training

def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def fit_graph_regressor(X, y, graph: WindFarmGraph, cfg: EmbeddingConfig, seed=0, epochs=30,
                        batch_size=64, learning_rate=3e-3, patience=5, params=None):
    """Train encoder + GNN + head to predict every farm's next value.

    ``X`` has shape (n_farms, T, W) in graph node order, ``y`` (n_farms, T).
    Returns ``(params, summary)``; training stops after ``epochs`` or when the
    epoch loss has not improved by 0.1% for ``patience`` epochs.
    """
    X, y = np.asarray(X, float), np.asarray(y, float)
    if X.shape[0] != graph.n or y.shape != X.shape[:2]:
        raise DimensionError("graph regressor farms", graph.n, X.shape[0])
    if X.shape[1] == 0:
        raise WindEnsembleError("graph regressor needs at least one training step")
    rng = np.random.default_rng(seed)
    p = params if params is not None else init_stse_params(cfg, rng)
    opt = dc.Optimizer(dc.OptimConfig(learning_rate))
    A = graph.mean_aggregation_matrix()
    best, stale, history = np.inf, 0, []
    for epoch in range(epochs):
        total = 0.0
        for idx in _minibatches(X.shape[1], batch_size, rng):
            tape = dc.Tape()
            v = tape.params(p)
            pred = tape_regress(v, X[:, idx], A, cfg)
            loss = dc.mean(dc.square(dc.sub(pred, y[:, idx])))
            p = opt.step(p, dc.backward(tape, loss))
            total += float(loss.value) * len(idx)
        epoch_loss = total / X.shape[1]
        history.append(epoch_loss)
        if epoch_loss < best * (1 - 1e-3):
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= patience:
                break
    logger.info("graph regressor: %d epochs, final mse %.6g", len(history), history[-1])
    return p, {"final_loss": history[-1], "iterations": len(history), "loss_history": history}


def predict_graph_regressor(params, X, graph: WindFarmGraph, cfg: EmbeddingConfig):
    tape = dc.Tape()
    return tape_regress(tape.params(params), np.asarray(X, float), graph.mean_aggregation_matrix(), cfg).value


def fit_mle(blocks, next_losses, cfg: EmbeddingConfig, seed=0, epochs=40, batch_size=128,
            learning_rate=3e-3, patience=5):
    """Train the loss compressor so a linear head can predict the next loss row.

    ``blocks`` (B, H, N) are loss-history inputs, ``next_losses`` (B, N) the
    losses that followed. The head is dropped afterwards; only the
    compressor is used in the state.
    """
    blocks, next_losses = np.asarray(blocks, float), np.asarray(next_losses, float)
    n_models = blocks.shape[-1]
    rng = np.random.default_rng(seed)
    p = init_mle_params(cfg, n_models, rng)
    if cfg.mle_dim == 0:
        return p, {"final_loss": float("nan"), "iterations": 0}
    scale = 1.0 / max(float(np.mean(blocks[blocks > 0])) if np.any(blocks > 0) else 1.0, 1e-12)
    p = p.replace({"input_scale": np.array(scale)})
    target = next_losses * scale
    trainable = [k for k in p if k != "input_scale"]
    opt = dc.Optimizer(dc.OptimConfig(learning_rate))
    best, stale, history = np.inf, 0, []
    for epoch in range(epochs):
        total = 0.0
        for idx in _minibatches(len(blocks), batch_size, rng):
            tape = dc.Tape()
            v = tape.params(p)
            z = tape_mle(v, blocks[idx], cfg)
            pred = dc.linear(z, v["head.W"], v["head.b"])
            loss = dc.mean(dc.square(dc.sub(pred, target[idx])))
            g = dc.backward(tape, loss)
            sub = dc.ParamSet({k: p[k] for k in trainable})
            sub = opt.step(sub, {k: g[k] for k in trainable})
            p = p.replace(dict(sub.items()))
            total += float(loss.value) * len(idx)
        epoch_loss = total / len(blocks)
        history.append(epoch_loss)
        if epoch_loss < best * (1 - 1e-3):
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= patience:
                break
    logger.info("loss embedding: %d epochs, final mse %.6g", len(history), history[-1])
    return p, {"final_loss": history[-1], "iterations": len(history)}
