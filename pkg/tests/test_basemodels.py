import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from windensemble import basemodels as bm
from windensemble import diffcore as dc
from windensemble import embedding as emb
from windensemble.data import FarmMeta, WindowSample, build_graph, window_arrays
from windensemble.errors import DimensionError, WindEnsembleError


def _samples(series, W, farm="wp1"):
    X, y, t = window_arrays(np.asarray(series, float), W, 1)
    return [WindowSample(farm, X[i], float(y[i]), int(t[i])) for i in range(len(y))]


def _ar_series(n, phi, seed, noise=0.05):
    rng = np.random.default_rng(seed)
    x = np.zeros(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + noise * rng.normal()
    return x


# ---------------------------------------------------------------- spec validation

@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(kind="autoregressive", p=0),
                                dict(kind="boosted_stumps", rounds=0),
                                dict(kind="boosted_stumps", shrinkage=0.0),
                                dict(kind="boosted_stumps", shrinkage=1.5),
                                dict(kind="recurrent", hidden_dim=0)])
def test_spec_invariants(kw):
    with pytest.raises(WindEnsembleError):
        bm.BaseModelSpec(**kw)


def test_fit_rejects_empty_and_graph_misuse():
    with pytest.raises(WindEnsembleError):
        bm.fit_base(bm.BaseModelSpec("persistence"), [])
    s = _samples(np.linspace(0, 1, 40), 8)
    with pytest.raises(WindEnsembleError):
        bm.fit_base(bm.BaseModelSpec("graph_regressor"), s)
    g = build_graph([FarmMeta("wp1", 40.0, 8.0)])
    with pytest.raises(WindEnsembleError):
        bm.fit_base(bm.BaseModelSpec("persistence"), s, graph=g)


# ---------------------------------------------------------------- persistence

def test_persistence_noop_fit_and_last_value():
    s = _samples(np.linspace(0, 1, 30), 8)
    m = bm.fit_base(bm.BaseModelSpec("persistence"), s)
    assert m.params == {} and m.summary["iterations"] == 0
    w = np.array([0.1] * 7 + [0.42])
    assert bm.predict_base(m, WindowSample("wp1", w, 0.0, 0)) == 0.42


@given(arrays(np.float64, 8, elements=st.floats(-1e6, 1e6)))
def test_property_persistence_is_last_element(w):
    m = bm.FittedBase(bm.BaseModelSpec("persistence"), 8)
    assert bm.predict_base(m, WindowSample("x", w, 0.0, 0)) == w[-1]


def test_window_length_mismatch():
    m = bm.FittedBase(bm.BaseModelSpec("persistence"), 8)
    with pytest.raises(DimensionError):
        bm.predict_base(m, WindowSample("x", np.zeros(6), 0.0, 0))


# ---------------------------------------------------------------- autoregressive

def test_ar1_noiseless_recovers_coefficient():
    x = 0.9 * 0.5 ** np.arange(40)
    m = bm.fit_base(bm.BaseModelSpec("autoregressive", p=1), _samples(x[:30], 4))
    assert abs(m.params["coef"][0] - 0.5) < 1e-8
    assert abs(m.params["intercept"]) < 1e-8


def test_ar1_forced_prediction():
    m = bm.FittedBase(bm.BaseModelSpec("autoregressive", p=1), 4,
                      {"intercept": 0.0, "coef": np.array([0.5])})
    assert bm.predict_base(m, WindowSample("x", np.array([0.0, 0.1, 0.3, 0.8]), 0.0, 0)) == 0.4


def test_ar_normal_equations_residual_is_zero():
    x = _ar_series(400, 0.7, seed=1)
    s = _samples(x, 6)
    m = bm.fit_base(bm.BaseModelSpec("autoregressive", p=3), s)
    X = np.stack([q.window for q in s])
    y = np.array([q.target for q in s])
    A = np.column_stack([np.ones(len(y)), X[:, ::-1][:, :3]])
    beta = np.concatenate([[m.params["intercept"]], m.params["coef"]])
    grad = A.T @ (A @ beta - y) / len(y)
    assert np.max(np.abs(grad)) < 1e-8
    # independent oracle: explicit normal equations
    np.testing.assert_allclose(beta, np.linalg.solve(A.T @ A, A.T @ y), atol=1e-10)


def test_ar_recovers_known_process():
    x = _ar_series(5000, 0.6, seed=2)
    m = bm.fit_base(bm.BaseModelSpec("autoregressive", p=1), _samples(x, 4))
    assert abs(m.params["coef"][0] - 0.6) < 0.03


def test_ar_singular_suggests_smaller_p():
    s = _samples(np.full(30, 0.3), 6)
    with pytest.raises(bm.SingularFitError, match="smaller p"):
        bm.fit_base(bm.BaseModelSpec("autoregressive", p=2), s)


def test_ar_order_longer_than_window():
    with pytest.raises(DimensionError):
        bm.fit_base(bm.BaseModelSpec("autoregressive", p=9), _samples(_ar_series(50, 0.5, 0), 8))


# ---------------------------------------------------------------- boosted stumps

def test_stumps_one_round_constant_target_predicts_mean():
    rng = np.random.default_rng(0)
    s = [WindowSample("x", rng.uniform(size=4), 0.37, i) for i in range(20)]
    m = bm.fit_base(bm.BaseModelSpec("boosted_stumps", rounds=1, shrinkage=1.0), s)
    for q in s:
        assert bm.predict_base(m, q) == pytest.approx(0.37, abs=1e-15)


def _brute_force_stump(X, r):
    best = (0.0, None)
    for j in range(X.shape[1]):
        for thr in np.unique(X[:, j])[:-1]:
            left = X[:, j] <= thr
            sse = np.sum((r[left] - r[left].mean()) ** 2) + np.sum((r[~left] - r[~left].mean()) ** 2)
            gain = np.sum((r - r.mean()) ** 2) - sse
            if best[1] is None or gain > best[0] + 1e-12:
                best = (gain, (j, thr, r[left].mean(), r[~left].mean()))
    return best


def test_stump_split_matches_brute_force():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(40, 3))
    r = np.sin(4 * X[:, 1]) + 0.1 * rng.normal(size=40)
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    j, thr, left, right, gain = bm._best_stump(Xs, order, r)
    bgain, (bj, bthr, bl, br) = _brute_force_stump(X, r)
    assert j == bj
    assert gain == pytest.approx(bgain, rel=1e-9)
    assert left == pytest.approx(bl) and right == pytest.approx(br)
    assert np.array_equal(X[:, j] <= thr, X[:, bj] <= bthr)


def test_stumps_training_loss_non_increasing():
    x = _ar_series(600, 0.8, seed=3)
    m = bm.fit_base(bm.BaseModelSpec("boosted_stumps", rounds=40, shrinkage=0.3), _samples(x, 6))
    losses = np.array(m.summary["loss_history"])
    assert np.all(np.diff(losses) <= 1e-15)
    assert losses[-1] < losses[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_property_stumps_non_increasing(seed, shrinkage):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(30, 3))
    y = rng.normal(size=30)
    _, losses = bm._fit_stumps(X, y, 10, shrinkage)
    assert np.all(np.diff(losses) <= 1e-12)


# ---------------------------------------------------------------- recurrent

def test_recurrent_cell_matches_manual_oracle():
    p = bm.init_recurrent(3, np.random.default_rng(0))
    w = np.array([0.2, -0.1, 0.5, 0.3])
    sig = lambda z: 1 / (1 + np.exp(-z))
    h = np.zeros(3)
    for x in w:
        z = sig(p["xz.W"][:, 0] * x + p["xz.b"] + p["hz.W"] @ h)
        r = sig(p["xr.W"][:, 0] * x + p["xr.b"] + p["hr.W"] @ h)
        n = np.tanh(p["xn.W"][:, 0] * x + p["xn.b"] + r * (p["hn.W"] @ h))
        h = (1 - z) * n + z * h
    expected = float((p["out.W"] @ h + p["out.b"])[0])
    m = bm.FittedBase(bm.BaseModelSpec("recurrent", hidden_dim=3), 4, {"net": p})
    assert bm.predict_base(m, WindowSample("x", w, 0.0, 0)) == pytest.approx(expected, abs=1e-12)


def test_recurrent_gradients():
    p = bm.init_recurrent(2, np.random.default_rng(1))
    X = np.random.default_rng(2).uniform(size=(3, 5))
    y = np.array([0.1, 0.5, 0.9])

    def loss(v):
        return dc.mean(dc.square(dc.sub(bm.tape_recurrent(v, X), y)))

    tape = dc.Tape()
    g = dc.backward(tape, loss(tape.params(p)))
    num = dc.numeric_gradient(lambda b: float(loss(dc.Tape().params(p.replace(b))).value), dict(p))
    for k in p:
        assert dc.relative_error(g[k], num[k]) < 1e-6, k


def test_recurrent_trains_and_is_deterministic():
    x = 0.5 + _ar_series(500, 0.8, seed=4, noise=0.1)
    s = _samples(x, 8)
    spec = bm.BaseModelSpec("recurrent", hidden_dim=4, epochs=8, learning_rate=1e-2)
    m1 = bm.fit_base(spec, s, seed=3)
    m2 = bm.fit_base(spec, s, seed=3)
    assert m1.params["net"].equals(m2.params["net"])
    hist = m1.summary["loss_history"]
    assert hist[-1] < hist[0]
    q = s[10]
    assert bm.predict_base(m1, q) == bm.predict_base(m1, q)


# ---------------------------------------------------------------- graph regressor

def _farms():
    return [FarmMeta(f"wp{i + 1}", 40.0 + 0.3 * i, 8.0 + 0.2 * (i % 2)) for i in range(4)]


def _graph_samples(T=120, W=10, seed=0):
    rng = np.random.default_rng(seed)
    x = 0.5 + np.cumsum(0.02 * rng.normal(size=(4, T + W)), axis=1)
    samples = []
    for i in range(4):
        samples += _samples(x[i], W, farm=f"wp{i + 1}")
    return samples


def test_graph_regressor_fit_and_predict_consistency():
    farms = _farms()
    g = build_graph(farms, k=2)
    samples = _graph_samples()
    spec = bm.BaseModelSpec("graph_regressor", epochs=3, gnn_layers=1)
    cfg = emb.EmbeddingConfig(window=10, channels=3, stse_dim=4)
    m = bm.fit_base(spec, samples, graph=g, seed=0, embedding_cfg=cfg)
    ws = bm.WindowSet.from_samples(samples)
    X, y, steps = ws.by_time(g.farm_ids)
    batch = bm.predict_windows(m, X, g)
    t = 5
    ctx = {f: X[i, t] for i, f in enumerate(g.farm_ids)}
    one = bm.predict_base(m, WindowSample("wp2", X[1, t], y[1, t], int(steps[t])), ctx, g)
    assert one == pytest.approx(batch[1, t], abs=1e-12)
    with pytest.raises(WindEnsembleError):
        bm.predict_base(m, WindowSample("wp2", X[1, t], 0.0, 0))


# ---------------------------------------------------------------- checkpoints

@pytest.mark.parametrize("kind", ["persistence", "autoregressive", "boosted_stumps", "recurrent"])
def test_checkpoint_round_trip_matches_reevaluation(tmp_path, kind):
    x = 0.5 + _ar_series(300, 0.8, seed=5, noise=0.1)
    s = _samples(x, 8)
    spec = bm.BaseModelSpec(kind, p=2, rounds=15, hidden_dim=3, epochs=2)
    m = bm.fit_base(spec, s, seed=1)
    path = tmp_path / "model.bin"
    bm.save_base(m, path)
    loaded = bm.load_base(path)
    assert loaded.spec == m.spec
    X = np.stack([q.window for q in s[:50]])
    np.testing.assert_allclose(bm.predict_windows(loaded, X), bm.predict_windows(m, X), rtol=0, atol=1e-12)
    # bit-identical repeated inference
    assert np.array_equal(bm.predict_windows(m, X), bm.predict_windows(m, X))


def test_graph_checkpoint_round_trip(tmp_path):
    g = build_graph(_farms(), k=2)
    samples = _graph_samples(T=60)
    cfg = emb.EmbeddingConfig(window=10, channels=3, stse_dim=4)
    m = bm.fit_base(bm.BaseModelSpec("graph_regressor", epochs=1), samples, graph=g, embedding_cfg=cfg)
    bm.save_base(m, tmp_path / "g.bin")
    loaded = bm.load_base(tmp_path / "g.bin")
    X, _, _ = bm.WindowSet.from_samples(samples).by_time(g.farm_ids)
    np.testing.assert_array_equal(bm.predict_windows(loaded, X, g), bm.predict_windows(m, X, g))


# ---------------------------------------------------------------- loss history

def _const(v, W=4):
    return bm.FittedBase(bm.BaseModelSpec("autoregressive", p=1), W, {"intercept": v, "coef": np.zeros(1)})


def test_record_losses_examples():
    sample = WindowSample("x", np.zeros(4), 0.5, 0)
    h = bm.LossHistory(2, horizon=16)
    bm.record_losses([_const(0.3), _const(0.7)], sample, 0.5, h)
    np.testing.assert_allclose(h.rows()[-1], [0.2, 0.2], atol=1e-15)
    bm.record_losses([_const(0.5), _const(0.5)], sample, 0.5, h)
    np.testing.assert_array_equal(h.rows()[-1], [0.0, 0.0])
    hs = bm.LossHistory(1, squared=True)
    bm.record_losses([_const(0.3)], sample, 0.5, hs)
    assert hs.rows()[-1, 0] == pytest.approx(0.04)


def test_loss_history_eviction():
    H = 5
    h = bm.LossHistory(2, horizon=H)
    for t in range(H + 3):
        h.append([t, 2 * t])
    assert len(h) == H
    np.testing.assert_array_equal(h.rows()[:, 0], np.arange(3, H + 3))
    assert h.matrix().shape == (H, 2)


def test_loss_history_rejects_bad_rows():
    h = bm.LossHistory(2)
    with pytest.raises(WindEnsembleError):
        h.append([-0.1, 0.0])
    with pytest.raises(DimensionError):
        h.append([0.1])


def test_loss_history_snapshot_is_a_copy():
    h = bm.LossHistory(2, horizon=3)
    h.append([0.1, 0.2])
    snap = h.snapshot()
    h.append([0.3, 0.4])
    assert snap.shape == (1, 2)


def test_mle_accepts_loss_history():
    cfg = emb.EmbeddingConfig(loss_horizon=4)
    p = emb.init_mle_params(cfg, 2, np.random.default_rng(0))
    h = bm.LossHistory(2, horizon=4)
    h.append([0.1, 0.2])
    np.testing.assert_array_equal(emb.compute_mle(h, p, cfg), emb.compute_mle(h.rows(), p, cfg))


def test_losses_bounded_on_synthetic_corpus():
    from windensemble.data import SyntheticConfig, gen_synthetic, sliding_windows

    frames, _, _ = gen_synthetic(SyntheticConfig(n_farms=2, length=800), seed=0)
    samples = [s for f in frames for s in sliding_windows(f, 24)]
    pool = [bm.fit_base(bm.BaseModelSpec(k, p=3, rounds=20), samples) for k in
            ("persistence", "autoregressive", "boosted_stumps")]
    h = bm.LossHistory(3, horizon=len(samples))
    for s in samples:
        bm.record_losses(pool, s, s.target, h)
    rows = h.rows()
    assert rows.min() >= 0 and rows.max() <= 2
