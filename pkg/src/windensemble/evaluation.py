"""
Metrics, experiment orchestration and reports
=============================================

:func:`run_experiment` fits the base-model pool, builds state embeddings,
trains the weighting agent and scores every base model, the uniform
average of the pool and the agent's ensemble on the test split.

Time layout for one corpus of ``T`` steps (indices are forecast targets)::

    [ W ........ pool fit ........ | .... agent training .... | .... test .... ]
                                   t_pool                     t_train

The pool is fitted on the first part only so the agent learns from
out-of-sample base forecasts, as it will face at test time.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import basemodels as bm
from . import embedding as emb
from . import rlens
from .config import RunConfig, canonical_json, derive_seed
from .data import build_graph, gen_synthetic, load_farm_meta, load_series_csv, window_arrays
from .errors import ConfigError, DataFormatError, WindEnsembleError

logger = logging.getLogger(__name__)

UNIFORM = "uniform_ensemble"
AGENT = "rl_ensemble"
ALL_FARMS = "all"


# ---------------------------------------------------------------- metrics

def _pair(truth, pred):
    t = np.asarray(truth, float).ravel()
    p = np.asarray(pred, float).ravel()
    if t.size == 0:
        raise WindEnsembleError("metrics need at least one point")
    if t.shape != p.shape:
        raise WindEnsembleError(f"length mismatch: truth {t.size}, pred {p.size}")
    return t, p


def mae(truth, pred):
    t, p = _pair(truth, pred)
    return float(np.mean(np.abs(t - p)))


def rmse(truth, pred):
    t, p = _pair(truth, pred)
    d = t - p
    return float(np.sqrt(np.mean(d * d)))


@dataclass(frozen=True)
class MetricResult:
    model: str
    farm_id: str
    mae: float
    rmse: float
    n: int

    def __post_init__(self):
        if self.n < 1 or self.mae < 0 or self.rmse < 0:
            raise WindEnsembleError("MetricResult needs n >= 1 and non-negative metrics")

    def value(self, metric):
        return getattr(self, metric)


def metric_result(model, farm_id, truth, pred):
    t, p = _pair(truth, pred)
    return MetricResult(model, farm_id, mae(t, p), rmse(t, p), int(t.size))


def improvement_pct(ours, baseline, metric="mae"):
    """``(baseline - ours) / baseline * 100`` on ``metric``.

    Accepts two :class:`MetricResult` (same farm) or two plain numbers.
    """
    if isinstance(ours, MetricResult) or isinstance(baseline, MetricResult):
        if ours.farm_id != baseline.farm_id:
            raise WindEnsembleError(f"farm mismatch: {ours.farm_id!r} vs {baseline.farm_id!r}")
        ours, baseline = ours.value(metric), baseline.value(metric)
    if not baseline > 0:
        raise WindEnsembleError("improvement_pct needs a positive baseline")
    return (baseline - ours) / baseline * 100.0


# ---------------------------------------------------------------- corpus

@dataclass
class Corpus:
    farm_ids: tuple
    farms: tuple
    power: np.ndarray          # (n_farms, T) normalized, node order
    timestamps: np.ndarray
    scale: np.ndarray          # per-farm (max - min) of the train-fitted scaler
    labels: np.ndarray | None  # regime label per step, synthetic corpora only


def load_corpus(cfg: RunConfig) -> Corpus:
    """Read or generate the corpus; CSV corpora are normalized on the train split."""
    if cfg.synthetic is not None:
        frames, farms, labels = gen_synthetic(cfg.synthetic, derive_seed(cfg.seed, 0, "corpus"))
        farms = sorted(farms, key=lambda f: f.farm_id)
        by_id = {f.farm_id: f for f in frames}
        power = np.stack([by_id[f.farm_id].power for f in farms])
        scale = np.array([by_id[f.farm_id].scaler.max - by_id[f.farm_id].scaler.min for f in farms])
        return Corpus(tuple(f.farm_id for f in farms), tuple(farms), power, frames[0].timestamps, scale, labels)
    src = cfg.csv
    for name, p in [("csv.series", q) for q in src.series] + [("csv.metadata", src.metadata)]:
        if not Path(p).exists():
            raise ConfigError(name, f"file not found: {p}")
    meta = {f.farm_id: f for f in load_farm_meta(src.metadata)}
    frames = {}
    for p in src.series:
        for fr in load_series_csv(p, src.schema):
            if fr.farm_id in frames:
                raise DataFormatError(f"farm {fr.farm_id!r} appears in more than one series", path=p)
            frames[fr.farm_id] = fr
    missing = sorted(set(frames) - set(meta))
    if missing:
        raise DataFormatError(f"no metadata for farm(s) {missing}", path=src.metadata)
    ids = sorted(frames)
    common = frames[ids[0]].timestamps
    for f in ids[1:]:
        common = np.intersect1d(common, frames[f].timestamps)
    if len(common) == 0:
        raise DataFormatError("farms share no timestamps")
    power_raw = []
    for f in ids:
        fr = frames[f]
        power_raw.append(fr.power[np.searchsorted(fr.timestamps, common)])
    power_raw = np.stack(power_raw)
    t_train = _boundaries(cfg, len(common))[1]
    power, scale = [], []
    for i, f in enumerate(ids):
        train = power_raw[i, :t_train]
        lo, hi = float(train.min()), float(train.max())
        if not hi > lo:
            raise DataFormatError(f"farm {f!r} is constant on the training split")
        power.append((power_raw[i] - lo) / (hi - lo))
        scale.append(hi - lo)
    return Corpus(tuple(ids), tuple(meta[f] for f in ids), np.stack(power), common, np.array(scale), None)


def _boundaries(cfg: RunConfig, T):
    """(t_pool, t_train) as target indices; raises on degenerate splits."""
    W, h = cfg.window, cfg.horizon
    first = W + h - 1
    t_train = int(math.floor(cfg.train_fraction * T))
    t_pool = first + int(math.floor((t_train - first) * (1.0 - cfg.agent_fraction)))
    n_pool, n_agent, n_test = t_pool - first, t_train - t_pool, T - t_train
    need = max(cfg.embedding.loss_horizon, cfg.agent.batch_size * cfg.agent.warmup_factor // 4, 2)
    if n_pool < max(2 * W, 10) or n_agent < need or n_test < 1:
        raise ConfigError("train_fraction", f"degenerate split for {T} steps: pool {n_pool}, "
                                            f"agent {n_agent}, test {n_test} targets")
    return t_pool, t_train


# ---------------------------------------------------------------- one repetition

@dataclass
class RepResult:
    rep: int
    seed: int
    results: list                  # MetricResult rows
    test_weights: np.ndarray       # (n_farms, T_test, N)
    test_forecasts: np.ndarray     # (n_farms, T_test, N)
    test_truth: np.ndarray         # (n_farms, T_test)
    test_t: np.ndarray             # target indices of the test steps
    train_log: list = field(default_factory=list)
    pool: list = field(default_factory=list)
    agent: object = None
    extras: dict = field(default_factory=dict)


def _windows(corpus: Corpus, cfg: RunConfig):
    Xs, ys = [], []
    for i in range(len(corpus.farm_ids)):
        X, y, t = window_arrays(corpus.power[i], cfg.window, cfg.horizon)
        Xs.append(X)
        ys.append(y)
    return np.stack(Xs), np.stack(ys), t


def _flat_set(X, y, t, farm_ids, mask):
    F = len(farm_ids)
    return bm.WindowSet(X[:, mask].reshape(-1, X.shape[-1]), y[:, mask].reshape(-1),
                        np.tile(t[mask], F), np.repeat(np.array(farm_ids), mask.sum()))


def fit_pool(cfg: RunConfig, X, y, t, graph, farm_ids, mask, rep):
    ws = _flat_set(X, y, t, farm_ids, mask)
    pool = []
    for spec in cfg.pool:
        seed = derive_seed(cfg.seed, rep, "base:" + spec.label)
        g = graph if spec.kind == "graph_regressor" else None
        ecfg = replace(cfg.embedding, gnn_layers=spec.gnn_layers) if g is not None else None
        pool.append(bm.fit_base(spec, ws, graph=g, seed=seed, embedding_cfg=ecfg))
        logger.info("fitted %s: %s", spec.label, pool[-1].summary.get("final_loss"))
    return pool


def fit_embeddings(cfg: RunConfig, X, y, losses, graph, pool, masks, rep):
    """Frozen STSE encoder (reused from the graph regressor when present) and
    loss compressor (trained on the agent part)."""
    ecfg = cfg.embedding
    pool_mask, agent_mask = masks
    encoder = None
    for m in pool:
        if m.needs_graph and m.embedding_cfg == ecfg:
            encoder = m.params["net"]
            break
    if encoder is None:
        encoder, _ = emb.fit_graph_regressor(X[:, pool_mask], y[:, pool_mask], graph, ecfg,
                                             seed=derive_seed(cfg.seed, rep, "encoder"), epochs=20)
    blocks = _loss_blocks(cfg, losses)
    N = losses.shape[-1]
    mle_params, _ = emb.fit_mle(blocks[:, agent_mask].reshape(-1, ecfg.loss_horizon, N),
                                losses[:, agent_mask].reshape(-1, N), ecfg,
                                seed=derive_seed(cfg.seed, rep, "mle"), epochs=cfg.mle_epochs)
    return encoder, mle_params


def _loss_blocks(cfg, losses):
    return np.stack([emb.loss_blocks(L, cfg.embedding.loss_horizon, lag=cfg.horizon) for L in losses])


def compute_states(cfg: RunConfig, X, losses, graph, encoder, mle_params):
    """State vectors (n_farms, T, stse_dim + mle_dim) for every step."""
    tape = emb.dc.Tape()
    stse = emb.tape_stse(tape.params(encoder), X, graph.mean_aggregation_matrix(), cfg.embedding).value
    mle = emb.compute_mle_batch(_loss_blocks(cfg, losses), mle_params, cfg.embedding)
    return np.concatenate([stse, mle], axis=-1)


def agent_config(cfg: RunConfig, state_dim, n_models, reward_scale=1.0):
    a = cfg.agent
    return rlens.ActorCriticConfig(state_dim=state_dim, n_models=n_models, actor_hidden=tuple(a.actor_hidden),
                                   critic_hidden=tuple(a.critic_hidden), actor_lr=a.actor_lr,
                                   critic_lr=a.critic_lr, gamma=a.gamma, batch_size=a.batch_size,
                                   capacity=a.capacity, total_steps=a.total_steps, noise_start=a.noise_start,
                                   noise_end=a.noise_end, warmup_factor=a.warmup_factor,
                                   actor_delay=a.actor_delay, reward=a.reward, reward_window=a.reward_window,
                                   reward_scale=a.reward_scale or reward_scale, shared=a.shared,
                                   optimizer=a.optimizer)


@dataclass
class TrainedPipeline:
    pool: list
    encoder: emb.dc.ParamSet
    mle: emb.dc.ParamSet
    agent: rlens.AgentParams | dict
    agent_config: rlens.ActorCriticConfig
    scaler: rlens.StateScaler
    log: list = field(default_factory=list)


@dataclass
class _Prepared:
    X: np.ndarray
    y: np.ndarray
    t: np.ndarray
    masks: tuple
    graph: object
    farm_ids: list


def _prepare(cfg: RunConfig, corpus: Corpus):
    X, y, t = _windows(corpus, cfg)
    t_pool, t_train = _boundaries(cfg, corpus.power.shape[1])
    masks = (t < t_pool, (t >= t_pool) & (t < t_train), t >= t_train)
    return _Prepared(X, y, t, masks, build_graph(corpus.farms, k=cfg.graph_k), list(corpus.farm_ids))


def _losses(cfg, forecasts, y):
    err = forecasts - y[:, :, None]
    return err * err if cfg.agent.reward == "squared" else np.abs(err)


def _streams(prep, states, forecasts, mask):
    return [rlens.FarmStream(f, states[i, mask], forecasts[i, mask], prep.y[i, mask], prep.t[mask])
            for i, f in enumerate(prep.farm_ids)]


def train_pipeline(cfg: RunConfig, corpus: Corpus, rep=0) -> TrainedPipeline:
    """Fit the pool, the embeddings and the agent for repetition ``rep``."""
    prep = _prepare(cfg, corpus)
    pool_mask, agent_mask, _ = prep.masks
    pool = fit_pool(cfg, prep.X, prep.y, prep.t, prep.graph, prep.farm_ids, pool_mask, rep)
    forecasts = bm.predict_pool(pool, prep.X, prep.graph)
    losses = _losses(cfg, forecasts, prep.y)
    encoder, mle_params = fit_embeddings(cfg, prep.X, prep.y, losses, prep.graph, pool,
                                         (pool_mask, agent_mask), rep)
    states = compute_states(cfg, prep.X, losses, prep.graph, encoder, mle_params)
    dim = states.shape[-1]
    scaler = (rlens.StateScaler.fit(states[:, agent_mask]) if cfg.agent.standardize_states
              else rlens.StateScaler.identity(dim))
    # absolute and squared rewards are measured in units of the uniform ensemble's typical loss
    unit = 1.0
    if cfg.agent.reward != "relative":
        uniform = forecasts[:, agent_mask].mean(axis=-1, keepdims=True)
        unit = max(float(_losses(cfg, uniform, prep.y[:, agent_mask]).mean()), 1e-12)
    acfg = agent_config(cfg, dim, len(pool), reward_scale=unit)
    result = rlens.train(_streams(prep, scaler(states), forecasts, agent_mask), acfg,
                         seed=derive_seed(cfg.seed, rep, "agent"))
    return TrainedPipeline(pool, encoder, mle_params, result.params, acfg, scaler, result.log)


def evaluate_pipeline(cfg: RunConfig, corpus: Corpus, trained: TrainedPipeline, rep=0) -> RepResult:
    """Score every base model, the uniform average and the agent on the test split."""
    prep = _prepare(cfg, corpus)
    test_mask = prep.masks[2]
    forecasts = bm.predict_pool(trained.pool, prep.X, prep.graph)
    states = trained.scaler(compute_states(cfg, prep.X, _losses(cfg, forecasts, prep.y), prep.graph,
                                           trained.encoder, trained.mle))
    weights = np.stack(rlens.policy_weights(trained.agent, _streams(prep, states, forecasts, test_mask)))
    f_test, y_test = forecasts[:, test_mask], prep.y[:, test_mask]
    preds = {m.name: f_test[:, :, j] for j, m in enumerate(trained.pool)}
    preds[UNIFORM] = f_test.mean(axis=-1)
    preds[AGENT] = rlens.ensemble_predict(f_test, weights)
    scale = corpus.scale if cfg.denormalize else np.ones(len(prep.farm_ids))
    rows = []
    for name, p in preds.items():
        for i, f in enumerate(prep.farm_ids):
            rows.append(metric_result(name, f, y_test[i] * scale[i], p[i] * scale[i]))
        rows.append(metric_result(name, ALL_FARMS, y_test * scale[:, None], p * scale[:, None]))
    return RepResult(rep, derive_seed(cfg.seed, rep, "agent"), rows, weights, f_test, y_test, prep.t[test_mask],
                     trained.log, trained.pool, trained.agent)


def run_once(cfg: RunConfig, corpus: Corpus, rep: int) -> RepResult:
    return evaluate_pipeline(cfg, corpus, train_pipeline(cfg, corpus, rep), rep)


def save_pipeline(trained: TrainedPipeline, out_dir):
    """Checkpoint directory: one file per base model, the embeddings and the agent."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for m in trained.pool:
        fname = f"base_{m.name}.bin" if m.spec.kind in ("recurrent", "graph_regressor") else f"base_{m.name}.json"
        bm.save_base(m, out / fname)
        names.append(fname)
    emb.dc.save_params(out / "encoder.bin", trained.encoder)
    emb.dc.save_params(out / "mle.bin", trained.mle)
    emb.dc.save_params(out / "state_scaler.bin", trained.scaler.as_paramset())
    agents = trained.agent if isinstance(trained.agent, dict) else {"shared": trained.agent}
    for key, p in agents.items():
        rlens.save_agent(out / f"agent_{key}.bin", p, trained.agent_config)
    (out / "manifest.json").write_text(canonical_json({"format": "windensemble.pipeline/1", "pool": names,
                                                       "agents": sorted(agents)}))
    rlens.write_log_csv(trained.log, out / "train_log.csv")


def load_pipeline(in_dir) -> TrainedPipeline:
    d = Path(in_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataFormatError("checkpoint manifest not found", path=mpath)
    manifest = json.loads(mpath.read_text())
    pool = [bm.load_base(d / n) for n in manifest["pool"]]
    encoder, _ = emb.dc.load_params(d / "encoder.bin")
    mle, _ = emb.dc.load_params(d / "mle.bin")
    scaler = rlens.StateScaler.from_paramset(emb.dc.load_params(d / "state_scaler.bin")[0])
    agents, acfg = {}, None
    for key in manifest["agents"]:
        agents[key], acfg = rlens.load_agent(d / f"agent_{key}.bin")
    agent = agents["shared"] if list(agents) == ["shared"] else agents
    return TrainedPipeline(pool, encoder, mle, agent, acfg, scaler)


# ---------------------------------------------------------------- regime attribution

def regime_segments(labels, t_index):
    """Contiguous (label, start, stop) runs of ``labels[t_index]`` (stop exclusive, positional)."""
    lab = np.asarray(labels)[t_index]
    out = []
    start = 0
    for i in range(1, len(lab) + 1):
        if i == len(lab) or lab[i] != lab[start]:
            out.append((str(lab[start]), start, i))
            start = i
    return out


def regime_attribution(rep: RepResult, labels, model_names):
    """Regime-correct model (lowest test MAE within the regime, pooled over farms)
    and the agent's mean weight on it per regime and per segment."""
    if labels is None:
        return None
    lab = np.asarray(labels)[rep.test_t]
    out = {"regimes": {}, "segments": []}
    for kind in sorted(set(lab.tolist())):
        m = lab == kind
        maes = [float(np.mean(np.abs(rep.test_forecasts[:, m, j] - rep.test_truth[:, m])))
                for j in range(len(model_names))]
        best = int(np.argmin(maes))
        out["regimes"][kind] = {
            "correct_model": model_names[best],
            "mae_by_model": dict(zip(model_names, maes)),
            "mean_weight": dict(zip(model_names, rep.test_weights[:, m].mean(axis=(0, 1)).tolist())),
            "weight_on_correct": float(rep.test_weights[:, m, best].mean()),
        }
    for kind, a, b in regime_segments(labels, rep.test_t):
        best = model_names.index(out["regimes"][kind]["correct_model"])
        out["segments"].append({"regime": kind, "start": int(rep.test_t[a]), "stop": int(rep.test_t[b - 1]) + 1,
                                "weight_on_correct": float(rep.test_weights[:, a:b, best].mean())})
    return out


# ---------------------------------------------------------------- report

@dataclass
class ForecastReport:
    models: list
    farms: list
    results: list                 # MetricResult averaged over repetitions
    per_seed: list                # dicts with rep/seed/model/farm/mae/rmse/n
    improvements: list            # dicts farm/metric/baseline/value
    fingerprint: str
    seed: int
    repetitions: int
    regimes: list | None = None   # one attribution per repetition (synthetic corpora)
    scale: str = "normalized"

    def get(self, model, farm=ALL_FARMS):
        for r in self.results:
            if r.model == model and r.farm_id == farm:
                return r
        raise KeyError((model, farm))

    def to_dict(self):
        records = []
        for r in self.results:
            for metric in ("mae", "rmse"):
                records.append({"model": r.model, "farm_id": r.farm_id, "metric": metric,
                                "value": r.value(metric), "n": r.n})
        return {"format": "windensemble.report/1", "fingerprint": self.fingerprint, "seed": self.seed,
                "repetitions": self.repetitions, "scale": self.scale, "models": self.models,
                "farms": self.farms, "records": records, "per_seed": self.per_seed,
                "improvements": self.improvements, "regimes": self.regimes}

    def to_json(self):
        return canonical_json(self.to_dict())

    def to_text(self):
        buf = io.StringIO()
        cols = self.farms
        width = max(12, *(len(c) + 2 for c in cols))
        name_w = max(len(m) for m in [*self.models, f"gain vs {UNIFORM} %"]) + 2
        for metric in ("mae", "rmse"):
            buf.write(f"{metric.upper()} ({self.scale} scale, mean over {self.repetitions} repetition(s))\n")
            buf.write("Model".ljust(name_w) + "".join(c.rjust(width) for c in cols) + "\n")
            for m in self.models:
                vals = "".join(f"{self.get(m, c).value(metric):.4f}".rjust(width) for c in cols)
                buf.write(m.ljust(name_w) + vals + "\n")
            for base in ("best_base", UNIFORM):
                label = f"gain vs {base} %"
                vals = []
                for c in cols:
                    hit = [d for d in self.improvements if d["farm_id"] == c and d["metric"] == metric
                           and d["baseline"] == base]
                    vals.append(f"{hit[0]['value']:.2f}".rjust(width) if hit else "-".rjust(width))
                buf.write(label.ljust(name_w) + "".join(vals) + "\n")
            buf.write("\n")
        if self.regimes:
            buf.write("Regime attribution (agent's mean weight on the regime-correct model)\n")
            for i, att in enumerate(self.regimes):
                for kind, d in att["regimes"].items():
                    buf.write(f"  rep {i} {kind:<10} {d['correct_model']:<18} {d['weight_on_correct']:.3f}\n")
        return buf.getvalue()

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "model", "farm_id", "metric", "value", "n"])
        for r in self.results:
            for metric in ("mae", "rmse"):
                w.writerow(["mean", r.model, r.farm_id, metric, repr(r.value(metric)), r.n])
        for d in self.per_seed:
            for metric in ("mae", "rmse"):
                w.writerow([d["rep"], d["model"], d["farm_id"], metric, repr(d[metric]), d["n"]])
        return buf.getvalue()

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for ext, text in (("json", self.to_json()), ("txt", self.to_text()), ("csv", self.to_csv())):
            p = out / f"{stem}.{ext}"
            p.write_text(text)
            paths[ext] = p
        return paths


def assemble_report(cfg: RunConfig, reps: Sequence[RepResult], labels=None) -> ForecastReport:
    models = [m.name for m in reps[0].pool] + [UNIFORM, AGENT]
    farms = sorted({r.farm_id for r in reps[0].results} - {ALL_FARMS}) + [ALL_FARMS]
    per_seed = []
    for rep in reps:
        for r in rep.results:
            per_seed.append({"rep": rep.rep, "seed": rep.seed, "model": r.model, "farm_id": r.farm_id,
                             "mae": r.mae, "rmse": r.rmse, "n": r.n})
    results = []
    for m in models:
        for f in farms:
            rows = [r for rep in reps for r in rep.results if r.model == m and r.farm_id == f]
            results.append(MetricResult(m, f, float(np.mean([r.mae for r in rows])),
                                        float(np.mean([r.rmse for r in rows])), rows[0].n))
    base_names = models[:-2]
    improvements = []
    by_key = {(r.model, r.farm_id): r for r in results}
    for f in farms:
        ours = by_key[(AGENT, f)]
        for metric in ("mae", "rmse"):
            best = min(base_names, key=lambda m: by_key[(m, f)].value(metric))
            for label, base in (("best_base", by_key[(best, f)]), (UNIFORM, by_key[(UNIFORM, f)])):
                improvements.append({"farm_id": f, "metric": metric, "baseline": label, "baseline_model": base.model,
                                     "value": improvement_pct(ours, base, metric)})
    regimes = None
    if labels is not None:
        regimes = [regime_attribution(rep, labels, models[:-2]) for rep in reps]
    return ForecastReport(models, farms, results, per_seed, improvements, cfg.fingerprint(), cfg.seed,
                          cfg.repetitions, regimes, "raw" if cfg.denormalize else "normalized")


def run_experiment(config: RunConfig, seed=None, return_runs=False):
    """Full pipeline averaged over ``config.repetitions`` seeded repetitions.

    ``seed`` overrides ``config.seed``. Validation of the corpus and the
    splits happens before any model is fitted.
    """
    cfg = config if seed is None else replace(config, seed=int(seed))
    corpus = load_corpus(cfg)
    _boundaries(cfg, corpus.power.shape[1])
    reps = [run_once(cfg, corpus, r) for r in range(cfg.repetitions)]
    report = assemble_report(cfg, reps, corpus.labels)
    return (report, reps) if return_runs else report
