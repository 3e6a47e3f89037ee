from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from windensemble import data as D
from windensemble.errors import DataFormatError, SequenceTooShortError, WindEnsembleError


def _frame(power, step=600, start="2010-01-01T00:00:00", farm="A"):
    ts = np.datetime64(start, "s") + np.timedelta64(step, "s") * np.arange(len(power))
    return D.TimeSeriesFrame(farm, ts, np.asarray(power, float), np.timedelta64(step, "s"))


# ---------------------------------------------------------------- CSV

def test_wide_csv_two_farms(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("timestamp,A,B\n"
                 "2010-01-01T00:00:00,1.0,2.0\n"
                 "2010-01-01T00:10:00,1.5,2.5\n"
                 "2010-01-01T00:20:00,2.0,3.0\n"
                 "2010-01-01T00:30:00,2.5,3.5\n")
    frames = D.load_series_csv(p)
    assert [f.farm_id for f in frames] == ["A", "B"]
    assert [len(f) for f in frames] == [4, 4]
    assert frames[0].step == np.timedelta64(600, "s")
    np.testing.assert_array_equal(frames[1].power, [2.0, 2.5, 3.0, 3.5])


def test_rows_are_sorted_by_timestamp(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("timestamp,A\n7200,3\n0,1\n3600,2\n")
    (f,) = D.load_series_csv(p, D.CsvSchema(timestamp_format="epoch"))
    np.testing.assert_array_equal(f.power, [1, 2, 3])


def test_duplicate_timestamp_names_row(tmp_path):
    p = tmp_path / "dup.csv"
    p.write_text("timestamp,A\n"
                 "2010-01-01T00:00:00,1\n"
                 "2010-01-01T01:00:00,2\n"
                 "2010-01-01T01:00:00,3\n")
    with pytest.raises(DataFormatError) as err:
        D.load_series_csv(p)
    assert err.value.line == 4
    assert "line 4" in str(err.value)


@pytest.mark.parametrize("row,msg", [("notatime,1", "timestamp"), ("2010-01-01T02:00:00,abc", "non-numeric")])
def test_bad_rows_raise_with_line(tmp_path, row, msg):
    p = tmp_path / "bad.csv"
    p.write_text("timestamp,A\n2010-01-01T00:00:00,1\n2010-01-01T01:00:00,2\n" + row + "\n")
    with pytest.raises(DataFormatError) as err:
        D.load_series_csv(p)
    assert err.value.line == 4 and msg in str(err.value)


def test_gap_rejected_by_default_and_filled_on_request(tmp_path):
    p = tmp_path / "gap.csv"
    p.write_text("timestamp,A\n0,1\n3600,2\n10800,4\n14400,5\n")
    with pytest.raises(DataFormatError):
        D.load_series_csv(p, D.CsvSchema(timestamp_format="epoch"))
    (f,) = D.load_series_csv(p, D.CsvSchema(timestamp_format="epoch", fill_gaps=True))
    np.testing.assert_array_equal(f.power, [1, 2, 2, 4, 5])


def test_gap_longer_than_cap_rejected_even_when_filling(tmp_path):
    p = tmp_path / "gap.csv"
    p.write_text("timestamp,A\n0,1\n3600,2\n" + "21600,3\n25200,4\n")
    with pytest.raises(DataFormatError):
        D.load_series_csv(p, D.CsvSchema(timestamp_format="epoch", step_seconds=3600, fill_gaps=True))


def test_long_layout(tmp_path):
    p = tmp_path / "long.csv"
    p.write_text('timestamp,farm_id,power\n0,"A",1\n0,B,5\n3600,A,2\n3600,B,6\n')
    frames = D.load_series_csv(p, D.CsvSchema(layout="long", timestamp_format="epoch"))
    assert {f.farm_id: list(f.power) for f in frames} == {"A": [1, 2], "B": [5, 6]}


def test_gefc_shaped_hourly_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    schema = D.CsvSchema(timestamp_column="date", timestamp_format="%Y%m%d%H")
    lines = ["date," + ",".join(f"wp{i}" for i in range(1, 8))]
    t0 = datetime(2009, 7, 1, 0)
    for h in range(72):
        stamp = (np.datetime64(t0, "s") + np.timedelta64(h, "h")).astype(datetime).strftime("%Y%m%d%H")
        lines.append(stamp + "," + ",".join(f"{v:.3f}" for v in rng.uniform(0, 1, 7)))
    src = tmp_path / "train.csv"
    src.write_text("\n".join(lines) + "\n")
    first = D.load_series_csv(src, schema)
    assert len(first) == 7 and all(len(f) == 72 for f in first)
    assert first[0].step == np.timedelta64(3600, "s")
    out = tmp_path / "again.csv"
    D.write_series_csv(first, out, schema)
    second = D.load_series_csv(out, schema)
    assert all(a.equals(b) for a, b in zip(first, second))
    out2 = tmp_path / "again2.csv"
    D.write_series_csv(second, out2, schema)
    assert out.read_bytes() == out2.read_bytes()


def test_farm_meta_round_trip(tmp_path):
    farms = [D.FarmMeta("A", 40.1, -70.2, 16.0), D.FarmMeta("B", -12.5, 150.0)]
    p = tmp_path / "meta.csv"
    D.write_farm_meta(farms, p)
    assert D.load_farm_meta(p) == farms


def test_farm_meta_rejects_bad_latitude(tmp_path):
    p = tmp_path / "meta.csv"
    p.write_text("farm_id,latitude,longitude\nA,95,0\n")
    with pytest.raises(DataFormatError) as err:
        D.load_farm_meta(p)
    assert err.value.line == 2


# ---------------------------------------------------------------- normalization

def test_normalize_mw_range():
    f, s = D.normalize_minmax(_frame([0.0, 8.0, 16.0]))
    np.testing.assert_array_equal(f.power, [0.0, 0.5, 1.0])
    assert (s.min, s.max) == (0.0, 16.0)


def test_normalize_identity_on_unit_range():
    src = [0.0, 0.25, 1.0, 0.5]
    f, s = D.normalize_minmax(_frame(src))
    np.testing.assert_array_equal(f.power, src)


def test_normalize_constant_raises():
    with pytest.raises(WindEnsembleError):
        D.normalize_minmax(_frame([3.0, 3.0, 3.0]))


def test_normalize_round_trip_1000_series():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        x = rng.uniform(0, 16, size=rng.integers(2, 50)) * rng.choice([1, 1e-3, 1e3])
        if np.ptp(x) == 0:
            continue
        f, s = D.normalize_minmax(_frame(x))
        assert f.power.min() == 0.0 and f.power.max() == 1.0
        np.testing.assert_allclose(s.inverse(f.power), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


# ---------------------------------------------------------------- split

def test_split_at_first_timestamp():
    f = _frame(np.arange(10.0))
    train, test = D.split_by_date(f, f.timestamps[0])
    assert len(train) == 0 and test.equals(f)


def test_split_partition():
    f = _frame(np.arange(10.0))
    train, test = D.split_by_date(f, f.timestamps[0] + np.timedelta64(2500, "s"))
    assert len(train) + len(test) == 10 and len(train) == 5
    assert not set(train.timestamps.tolist()) & set(test.timestamps.tolist())
    np.testing.assert_array_equal(np.concatenate([train.power, test.power]), f.power)


def test_split_outside_range_raises():
    f = _frame(np.arange(4.0))
    with pytest.raises(WindEnsembleError):
        D.split_by_date(f, "2009-01-01T00:00:00")


def test_two_year_ten_minute_split_matches_calendar():
    n = int((datetime(2012, 1, 1) - datetime(2010, 1, 1)).total_seconds() // 600)
    f = _frame(np.sin(np.arange(n) / 300.0), step=600, start="2010-01-01T00:00:00")
    train, test = D.split_by_date(f, "2011-01-01T00:00:00")
    expected_train = int((datetime(2011, 1, 1) - datetime(2010, 1, 1)).total_seconds() // 600)
    assert len(train) == expected_train == 365 * 144
    assert len(test) == n - expected_train == 365 * 144
    assert train.timestamps[-1] == np.datetime64("2010-12-31T23:50:00")
    assert test.timestamps[0] == np.datetime64("2011-01-01T00:00:00")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.data())
def test_split_is_always_a_partition(n, data):
    f = _frame(np.arange(float(n)), step=3600)
    k = data.draw(st.integers(0, (n - 1) * 3600))
    train, test = D.split_by_date(f, f.timestamps[0] + np.timedelta64(k, "s"))
    np.testing.assert_array_equal(np.concatenate([train.timestamps, test.timestamps]), f.timestamps)
    assert train.timestamps.size == 0 or test.timestamps.size == 0 or train.timestamps[-1] < test.timestamps[0]


# ---------------------------------------------------------------- windows

def test_window_count():
    assert len(D.sliding_windows(_frame(np.arange(5.0)), 3, 1)) == 2


def test_window_enumeration():
    s = D.sliding_windows(_frame([1.0, 2, 3, 4]), 2, 1)
    assert [(list(w.window), w.target) for w in s] == [([1, 2], 3), ([2, 3], 4)]
    assert [w.t_index for w in s] == [1, 2]


def test_window_too_short():
    with pytest.raises(SequenceTooShortError) as err:
        D.sliding_windows(_frame([1.0, 2, 3]), 3, 1)
    assert err.value.required == 4


def test_no_target_leakage_exhaustive():
    series = np.arange(32.0)  # value == position
    f = _frame(series)
    for W in range(1, 9):
        for h in range(1, 9):
            samples = D.sliding_windows(f, W, h)
            assert len(samples) == 32 - W - h + 1
            for i, s in enumerate(samples):
                pos = int(s.target)
                window_pos = set(s.window.astype(int))
                assert pos not in window_pos
                assert pos == i + W - 1 + h
                assert max(window_pos) == s.t_index < pos


# ---------------------------------------------------------------- graph

def _chord_km(a, b):
    def unit(f):
        la, lo = np.radians(f.latitude), np.radians(f.longitude)
        return np.array([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)])
    return 2 * D.EARTH_RADIUS_KM * np.arcsin(np.linalg.norm(unit(a) - unit(b)) / 2)


def _brute_force_edges(farms, k):
    edges = set()
    for a in farms:
        ranked = sorted((f for f in farms if f.farm_id != a.farm_id),
                        key=lambda f: (round(_chord_km(a, f), 9), f.farm_id))
        edges |= {(a.farm_id, f.farm_id) for f in ranked[:min(k, len(farms) - 1)]}
    return edges


def test_single_farm_has_no_edges():
    g = D.build_graph([D.FarmMeta("A", 10, 10)], k=5)
    assert g.edge_set() == set()


def test_collinear_farms_k1():
    farms = [D.FarmMeta(f"lon{d}", 0.0, float(d)) for d in (0, 1, 3)]
    g = D.build_graph(farms, k=1)
    expected = {("lon0", "lon1"), ("lon1", "lon0"), ("lon3", "lon1")}
    assert g.edge_set() == expected == _brute_force_edges(farms, 1)


SIX = [D.FarmMeta(n, 40 + dy, -70 + dx) for n, dy, dx in
       [("A", 0, 0), ("B", 0.3, 0.1), ("C", -0.2, 0.3), ("D", 0.1, -0.4), ("E", -0.5, -0.2), ("F", 0.6, 0.6)]]


def test_six_farm_layout_degree_two():
    g = D.build_graph(SIX, k=2)
    assert all(len(e) == 2 for e in g.edges)
    assert g.edge_set() == _brute_force_edges(SIX, 2)
    assert all(a != b for a, b in g.edge_set())


def test_duplicate_farm_id_rejected():
    with pytest.raises(WindEnsembleError):
        D.build_graph([D.FarmMeta("A", 1, 1), D.FarmMeta("A", 1, 1)], k=1)


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(6))), st.integers(0, 7))
def test_graph_permutation_invariant(perm, k):
    base = D.build_graph(SIX, k)
    other = D.build_graph([SIX[i] for i in perm], k)
    assert base.edge_set() == other.edge_set()
    assert all(len(e) == min(k, 5) for e in other.edges)


def test_mean_aggregation_matrix_rows():
    g = D.build_graph(SIX, k=3)
    A = g.mean_aggregation_matrix()
    np.testing.assert_allclose(A.sum(axis=1), 1.0)
    assert np.all(np.diag(A) == 0)


# ---------------------------------------------------------------- synthetic

def test_synthetic_is_deterministic():
    cfg = D.SyntheticConfig(n_farms=3, length=400)
    f1, m1, l1 = D.gen_synthetic(cfg, 9)
    f2, m2, l2 = D.gen_synthetic(cfg, 9)
    assert all(a.equals(b) for a, b in zip(f1, f2)) and m1 == m2
    np.testing.assert_array_equal(l1, l2)
    f3, _, _ = D.gen_synthetic(cfg, 10)
    assert not f1[0].equals(f3[0])


def test_synthetic_is_normalized_and_labelled():
    frames, farms, labels = D.gen_synthetic(D.SyntheticConfig(n_farms=4, length=1000), 0)
    for f in frames:
        assert f.power.min() == 0.0 and f.power.max() == 1.0
    assert labels.shape == (1000,)
    assert labels[0] == "ar1" and labels[250] == "trend" and labels[500] == "ar1"


def test_zero_spatial_correlation():
    cfg = D.SyntheticConfig(n_farms=3, length=10_000, spatial_corr=0.0,
                            regimes=(D.RegimeSpec("ar1", 10_000, phi=0.5, noise=0.1),))
    frames, _, _ = D.gen_synthetic(cfg, 4)
    X = np.stack([f.power for f in frames])
    r = np.corrcoef(X)
    assert np.all(np.abs(r[np.triu_indices(3, 1)]) < 0.1)


def test_positive_spatial_correlation_decays_with_distance():
    cfg = D.SyntheticConfig(n_farms=5, length=10_000, spatial_corr=0.9, corr_length_km=100.0,
                            regimes=(D.RegimeSpec("ar1", 10_000, phi=0.5, noise=0.1),))
    frames, farms, _ = D.gen_synthetic(cfg, 2)
    r = np.corrcoef(np.stack([f.power for f in frames]))
    dist = D.distance_matrix_km(farms)
    iu = np.triu_indices(5, 1)
    assert np.all(r[iu] > 0.1)
    assert np.corrcoef(dist[iu], r[iu])[0, 1] < 0


def test_ar1_segment_coefficient_recovered():
    cfg = D.SyntheticConfig(n_farms=2, length=6000,
                            regimes=(D.RegimeSpec("ar1", 6000, phi=0.7, noise=0.05),))
    frames, _, _ = D.gen_synthetic(cfg, 1)
    for f in frames:
        x = f.power
        A = np.column_stack([np.ones(len(x) - 1), x[:-1]])
        coef = np.linalg.lstsq(A, x[1:], rcond=None)[0][1]
        assert abs(coef - 0.7) <= 0.05


def test_synthetic_rejects_nonpositive_length():
    with pytest.raises(WindEnsembleError):
        D.gen_synthetic(D.SyntheticConfig(length=0), 0)


def test_synthetic_csv_round_trip(tmp_path):
    frames, farms, _ = D.gen_synthetic(D.SyntheticConfig(n_farms=3, length=50), 0)
    D.write_series_csv(frames, tmp_path / "s.csv")
    back = D.load_series_csv(tmp_path / "s.csv")
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.power, b.power)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)
