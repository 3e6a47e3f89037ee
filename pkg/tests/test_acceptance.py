"""Acceptance criteria 1-9; each test prints one PASS/FAIL line."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from windensemble import basemodels as bm
from windensemble import cli
from windensemble import embedding as emb
from windensemble import evaluation as ev
from windensemble import gradcheck as gc
from windensemble import rlens as rl
from windensemble.config import load_config
from windensemble.data import FarmMeta, build_graph

REGIME_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "regime_switch.json"
REGIME_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1 gradient suite

def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    rows = gc.run_suite(points=100, seed=0)
    elapsed = time.perf_counter() - t0
    names = {r.name for r in rows}
    required = {"linear", "dilated_conv", "softmax", "gnn_layer", "mle_mlp", "actor", "critic"}
    worst = max(r.max_rel_error for r in rows)
    ok = required <= names and all(r.points >= 100 for r in rows) and worst < 1e-4 and elapsed < 60
    verdict(1, ok, f"{len(rows)} cases x 100 points, max rel error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------- 2 metric oracles

def test_criterion_2_metric_oracles(verdict):
    rng = np.random.default_rng(2)
    truth = rng.uniform(size=10_000)
    pred = rng.uniform(size=10_000)
    n = truth.size
    o_mae = math.fsum(abs(a - b) for a, b in zip(truth, pred)) / n
    o_rmse = math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(truth, pred)) / n)
    d_mae, d_rmse = abs(ev.mae(truth, pred) - o_mae), abs(ev.rmse(truth, pred) - o_rmse)
    jensen = 0
    for _ in range(1000):
        k = int(rng.integers(1, 200))
        r = rng.normal(size=k) * rng.exponential()
        jensen += ev.rmse(r, np.zeros(k)) >= ev.mae(r, np.zeros(k))
    ok = d_mae <= 1e-12 and d_rmse <= 1e-12 and jensen == 1000
    verdict(2, ok, f"|mae - fsum| {d_mae:.1e}, |rmse - fsum| {d_rmse:.1e} (<= 1e-12); rmse >= mae on {jensen}/1000")


# ---------------------------------------------------------------- 3 selection consistency

def test_criterion_3_selection_consistency(verdict, smoke_doc):
    from windensemble.config import config_from_dict

    rng = np.random.default_rng(3)
    F = rng.uniform(size=(500, 4))
    exact = all(rl.ensemble_predict(F[i], np.eye(4)[i % 4]) == F[i, i % 4] for i in range(500))
    smoke_doc["pool"] = [{"kind": "boosted_stumps", "rounds": 20}]
    rep = ev.run_experiment(config_from_dict(smoke_doc))
    gaps = [max(abs(rep.get(ev.AGENT, f).mae - rep.get("boosted_stumps", f).mae),
                abs(rep.get(ev.AGENT, f).rmse - rep.get("boosted_stumps", f).rmse)) for f in rep.farms]
    ok = exact and max(gaps) <= 1e-9
    verdict(3, ok, f"one-hot selection exact on 500 draws: {exact}; single-model pool gap {max(gaps):.1e} (<= 1e-9)")


# ---------------------------------------------------------------- 4 GNN structure

def _random_six_farms(rng):
    # six farms scattered over roughly 100 km, like a regional cluster
    return [FarmMeta(f"wf{i + 1}", 39.5 + rng.uniform(0, 1.0), -105.5 + rng.uniform(0, 1.2)) for i in range(6)]


def test_criterion_4_gnn_structure(verdict):
    rng = np.random.default_rng(4)
    perm_ok = local_ok = True
    edgeless_err = 0.0
    checks = 0
    for trial in range(25):
        k = int(rng.integers(1, 4))
        L = int(rng.integers(1, 4))
        g = build_graph(_random_six_farms(rng), k=k)
        cfg = emb.EmbeddingConfig(gnn_layers=L)
        p = emb.init_stse_params(cfg, rng)
        layers = emb.gnn_layers_from(p, L)
        h = rng.normal(size=(6, cfg.stse_dim))

        # neighbor order: any reordering of every neighbor list, bit-identical
        shuffled = type(g)(g.nodes, tuple(tuple(rng.permutation(e).tolist()) for e in g.edges), g.k)
        perm_ok &= np.array_equal(emb.gnn_forward(g, h, layers), emb.gnn_forward(shuffled, h, layers))

        # L-hop locality through the full encoder + GNN stack
        X = rng.uniform(size=(6, cfg.window))
        base = emb.compute_stse(g, X, p, cfg)
        for u in range(6):
            X2 = X.copy()
            X2[u] += rng.uniform(0.2, 1.0)
            out = emb.compute_stse(g, X2, p, cfg)
            for v in range(6):
                if g.hop_distances(v)[u] > L:
                    checks += 1
                    local_ok &= np.array_equal(out[v], base[v])

        # edgeless graph equals independent per-node processing
        empty = type(g)(g.nodes, tuple(() for _ in range(6)), 0)
        got = emb.gnn_forward(empty, h, layers)
        for v in range(6):
            x = h[v]
            for lay in layers:
                m = np.tanh(lay.msg_W @ x + lay.msg_b)
                x = np.tanh(lay.upd_W @ np.concatenate([np.zeros_like(m), m]) + lay.upd_b)
            edgeless_err = max(edgeless_err, float(np.max(np.abs(got[v] - x))))
    ok = perm_ok and local_ok and edgeless_err <= 1e-12 and checks > 0
    verdict(4, ok, f"25 random 6-farm graphs: neighbor-order exact {perm_ok}, locality exact {local_ok} "
                   f"({checks} out-of-range pairs), edgeless max err {edgeless_err:.1e} (<= 1e-12)")


# ---------------------------------------------------------------- 5 and 6 regime experiment

@pytest.fixture(scope="module")
def regime_runs():
    cfg = load_config(REGIME_CONFIG)
    t0 = time.perf_counter()
    reports = [ev.run_experiment(cfg, seed=s) for s in REGIME_SEEDS]
    return reports, time.perf_counter() - t0


def test_criterion_5_regime_switching_accuracy(verdict, regime_runs):
    reports, elapsed = regime_runs
    rows = []
    for rep in reports:
        ours, uni = rep.get(ev.AGENT).mae, rep.get(ev.UNIFORM).mae
        best = min(rep.get(m).mae for m in rep.models if m not in (ev.AGENT, ev.UNIFORM))
        rows.append((ours, uni, best, ev.improvement_pct(ours, uni)))
    a = all(o < u for o, u, _, _ in rows)
    b = all(o <= 1.02 * bst for o, _, bst, _ in rows)
    c = sum(g >= 5.0 for *_, g in rows)
    ok = a and b and c >= 3 and elapsed < 600
    gains = ", ".join(f"{g:.1f}%" for *_, g in rows)
    verdict(5, ok, f"agent < uniform on all seeds: {a}; agent <= 1.02 x best base on all seeds: {b}; "
                   f">= 5% gain on {c}/5 seeds (need 3) [{gains}]; {elapsed:.0f}s (< 600s)")


def test_criterion_6_regime_attribution(verdict, regime_runs):
    reports, _ = regime_runs
    worst = math.inf
    where = None
    for seed, rep in zip(REGIME_SEEDS, reports):
        for seg in rep.regimes[0]["segments"]:
            if seg["weight_on_correct"] < worst:
                worst, where = seg["weight_on_correct"], (seed, seg["regime"], seg["start"])
    verdict(6, worst > 0.6, f"min over seeds and regime segments of weight on the regime-correct model "
                            f"{worst:.3f} (> 0.6) at seed/regime/start {where}")


# ---------------------------------------------------------------- 7 replay buffer

def test_criterion_7_replay_buffer(verdict):
    def tr(i):
        return rl.Transition(np.array([float(i)]), np.array([1.0]), float(i), np.array([float(i)]))

    cap_ok = fifo_ok = True
    for cap in (1, 3, 7, 32):
        buf = rl.ReplayBuffer(cap, seed=cap)
        for i in range(5 * cap + 3):
            buf.push(tr(i))
            cap_ok &= len(buf) <= cap
            fifo_ok &= [t.r for t in buf.items()] == [float(j) for j in range(max(0, i + 1 - cap), i + 1)]
    buf = rl.ReplayBuffer(10, seed=7)
    for i in range(10):
        buf.push(tr(i))
    counts = np.bincount([int(buf.sample_indices(1)[0]) for _ in range(10_000)], minlength=10)
    chi2 = float(np.sum((counts - 1000.0) ** 2 / 1000.0))
    bound = 9 + 3 * math.sqrt(18)  # mean + 3 sd of chi-square with 9 dof
    ok = cap_ok and fifo_ok and chi2 < bound
    verdict(7, ok, f"capacity respected {cap_ok}, strict FIFO {fifo_ok}, chi-square {chi2:.2f} (< {bound:.2f})")


# ---------------------------------------------------------------- 8 end-to-end determinism

def test_criterion_8_end_to_end_determinism(verdict, tmp_path, smoke_doc):
    import json

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(smoke_doc))
    codes = [cli.run(["compare", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) for d in "ab"]
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("report.json", "report.txt", "report.csv")}
    ok = codes == [0, 0] and all(same.values())
    verdict(8, ok, f"compare exit codes {codes}, byte-identical {same}")


# ---------------------------------------------------------------- 9 persistence baseline

def test_criterion_9_persistence_baseline(verdict):
    from dataclasses import replace

    cfg = replace(load_config(REGIME_CONFIG), pool=(bm.BaseModelSpec("persistence"),))
    corpus = ev.load_corpus(cfg)
    X, y, t = ev._windows(corpus, cfg)
    t_pool, t_train = ev._boundaries(cfg, corpus.power.shape[1])
    graph = build_graph(corpus.farms, k=cfg.graph_k)
    pool = ev.fit_pool(cfg, X, y, t, graph, list(corpus.farm_ids), t < t_pool, 0)
    test = t >= t_train
    pred = bm.predict_pool(pool, X[:, test], graph)[..., 0]
    ok = np.array_equal(pred, X[:, test, -1])
    verdict(9, ok, f"persistence forecast equals the window's last value on all {pred.size} test samples: {ok}")
