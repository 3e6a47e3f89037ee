"""
Wind-farm time series: ingestion, scaling, splitting, windowing, farm
graphs and synthetic regime-switching corpora.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from .errors import DataFormatError, SequenceTooShortError, WindEnsembleError

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class FarmMeta:
    farm_id: str
    latitude: float
    longitude: float
    capacity: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise WindEnsembleError(f"farm {self.farm_id}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise WindEnsembleError(f"farm {self.farm_id}: longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class MinMaxScaler:
    min: float
    max: float

    def __post_init__(self):
        if not self.min < self.max:
            raise WindEnsembleError(f"scaler requires min < max, got ({self.min}, {self.max})")

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass(frozen=True, eq=False)
class TimeSeriesFrame:
    """One farm's equispaced power series.

    ``timestamps`` are ``datetime64[s]``; ``step`` is the fixed spacing.
    ``scaler`` is set once the power values have been min-max normalized.
    """

    farm_id: str
    timestamps: np.ndarray
    power: np.ndarray
    step: np.timedelta64
    scaler: MinMaxScaler | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        pw = np.asarray(self.power, dtype=np.float64)
        ts.setflags(write=False)
        pw = pw.copy()
        pw.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "power", pw)
        object.__setattr__(self, "step", np.timedelta64(self.step, "s"))
        if ts.shape != pw.shape or ts.ndim != 1:
            raise WindEnsembleError(f"farm {self.farm_id}: timestamps and power must be equal-length vectors")
        if self.step <= np.timedelta64(0, "s"):
            raise WindEnsembleError(f"farm {self.farm_id}: step must be positive")
        if len(ts) > 1 and np.any(np.diff(ts) != self.step):
            raise WindEnsembleError(f"farm {self.farm_id}: timestamps are not equispaced at {self.step}")
        if not np.all(np.isfinite(pw)):
            raise WindEnsembleError(f"farm {self.farm_id}: non-finite power values")

    def __len__(self):
        return len(self.power)

    def equals(self, other: "TimeSeriesFrame") -> bool:
        return (self.farm_id == other.farm_id and self.step == other.step
                and np.array_equal(self.timestamps, other.timestamps)
                and self.power.tobytes() == other.power.tobytes()
                and self.scaler == other.scaler)


@dataclass(frozen=True)
class WindowSample:
    farm_id: str
    window: np.ndarray
    target: float
    t_index: int


@dataclass(frozen=True)
class WindFarmGraph:
    """Directed k-nearest-neighbor graph over farms.

    Nodes are kept sorted by ``farm_id``; ``edges[i]`` lists the node indices
    of farm ``i``'s neighbors, nearest first. These are the farms whose
    messages node ``i`` aggregates.
    """

    nodes: tuple
    edges: tuple
    k: int

    @property
    def n(self):
        return len(self.nodes)

    @property
    def farm_ids(self):
        return [f.farm_id for f in self.nodes]

    def index(self, farm_id):
        for i, f in enumerate(self.nodes):
            if f.farm_id == farm_id:
                return i
        raise KeyError(farm_id)

    def neighbors(self, farm_id):
        return [self.nodes[j].farm_id for j in self.edges[self.index(farm_id)]]

    def edge_set(self):
        return {(self.nodes[i].farm_id, self.nodes[j].farm_id)
                for i, nbrs in enumerate(self.edges) for j in nbrs}

    def mean_aggregation_matrix(self):
        """Row ``v`` averages over ``v``'s neighbors; isolated rows are zero."""
        A = np.zeros((self.n, self.n))
        for v, nbrs in enumerate(self.edges):
            if nbrs:
                A[v, list(nbrs)] = 1.0 / len(nbrs)
        return A

    def hop_distances(self, source: int):
        """Hops along neighbor lists from ``source``; unreachable nodes get inf."""
        dist = [math.inf] * self.n
        dist[source] = 0
        frontier = [source]
        while frontier:
            nxt = []
            for u in frontier:
                for v in self.edges[u]:
                    if dist[v] == math.inf:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        return dist


# ---------------------------------------------------------------- CSV I/O

@dataclass(frozen=True)
class CsvSchema:
    """Describes a power CSV.

    ``layout="wide"``: one timestamp column plus one power column per farm
    (all non-timestamp columns unless ``farm_columns`` is given).
    ``layout="long"``: timestamp, farm id and power columns.
    ``timestamp_format`` is ``"iso"``, ``"epoch"`` (integer seconds) or a
    ``strptime`` pattern such as ``"%Y%m%d%H"``.
    """

    layout: str = "wide"
    timestamp_column: str = "timestamp"
    timestamp_format: str = "iso"
    farm_columns: tuple | None = None
    farm_column: str = "farm_id"
    power_column: str = "power"
    step_seconds: int | None = None
    fill_gaps: bool = False
    max_gap: int = 3

    def __post_init__(self):
        if self.layout not in ("wide", "long"):
            raise WindEnsembleError(f"unknown CSV layout {self.layout!r}")


def _parse_timestamp(text, fmt):
    text = text.strip()
    if fmt == "epoch":
        return np.datetime64(int(text), "s")
    if fmt == "iso":
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    else:
        dt = datetime.strptime(text, fmt)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def _format_timestamp(ts, fmt):
    if fmt == "epoch":
        return str(int(ts.astype("datetime64[s]").astype(np.int64)))
    dt = ts.astype("datetime64[s]").astype(datetime)
    if fmt == "iso":
        return dt.isoformat()
    return dt.strftime(fmt)


def _parse_power(text, line, path):
    text = text.strip()
    if text == "":
        return math.nan
    try:
        val = float(text)
    except ValueError:
        raise DataFormatError(f"non-numeric power value {text!r}", line, path) from None
    if not math.isfinite(val):
        raise DataFormatError(f"non-finite power value {text!r}", line, path)
    return val


def _assemble(farm_id, stamps, values, lines, schema, path):
    """Sort one farm's rows, check spacing, optionally forward-fill short gaps."""
    order = np.argsort(stamps, kind="stable")
    ts = np.asarray(stamps, dtype="datetime64[s]")[order]
    pw = np.asarray(values, dtype=np.float64)[order]
    ln = np.asarray(lines)[order]
    if len(ts) == 0:
        raise DataFormatError(f"farm {farm_id}: no rows", path=path)
    if schema.step_seconds is not None:
        step = np.timedelta64(int(schema.step_seconds), "s")
    elif len(ts) > 1:
        diffs, counts = np.unique(np.diff(ts), return_counts=True)
        step = diffs[np.argmax(counts)]
    else:
        step = np.timedelta64(3600, "s")
    out_ts, out_pw = [ts[0]], [pw[0]]
    for i in range(1, len(ts)):
        gap = ts[i] - ts[i - 1]
        if gap != step:
            missing = int(gap // step) - 1
            if gap % step != np.timedelta64(0, "s") or missing < 1:
                raise DataFormatError(f"farm {farm_id}: irregular spacing {gap} (step {step})", int(ln[i]), path)
            if not schema.fill_gaps or missing > schema.max_gap:
                raise DataFormatError(
                    f"farm {farm_id}: gap of {missing} missing step(s) before {ts[i]}", int(ln[i]), path)
            logger.warning("%s: farm %s forward-filling %d missing step(s) before %s",
                           path, farm_id, missing, ts[i])
            for m in range(1, missing + 1):
                out_ts.append(ts[i - 1] + m * step)
                out_pw.append(out_pw[-1])
        out_ts.append(ts[i])
        out_pw.append(pw[i])
    pw = np.array(out_pw)
    # empty cells: forward-fill runs up to max_gap when allowed
    nan_idx = np.flatnonzero(np.isnan(pw))
    if len(nan_idx):
        if not schema.fill_gaps:
            raise DataFormatError(f"farm {farm_id}: missing power value", int(ln[min(nan_idx[0], len(ln) - 1)]), path)
        run = 0
        for i in range(len(pw)):
            if np.isnan(pw[i]):
                run += 1
                if i == 0 or run > schema.max_gap:
                    raise DataFormatError(f"farm {farm_id}: cannot fill missing values at {out_ts[i]}", path=path)
                pw[i] = pw[i - 1]
            else:
                run = 0
        logger.warning("%s: farm %s forward-filled %d empty value(s)", path, farm_id, len(nan_idx))
    return TimeSeriesFrame(farm_id, np.array(out_ts, dtype="datetime64[s]"), pw, step)


def load_series_csv(path, schema: CsvSchema = CsvSchema()):
    """Read a wide or long power CSV into one :class:`TimeSeriesFrame` per farm.

    Frames are returned in order of first appearance. Line numbers in errors
    count the header as line 1.
    """
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("empty file (header row required)", path=path) from None
        if schema.timestamp_column not in header:
            raise DataFormatError(f"missing timestamp column {schema.timestamp_column!r}", 1, path)
        t_col = header.index(schema.timestamp_column)
        if schema.layout == "wide":
            names = list(schema.farm_columns) if schema.farm_columns else \
                [h for i, h in enumerate(header) if i != t_col]
            missing = [n for n in names if n not in header]
            if missing or not names:
                raise DataFormatError(f"missing farm column(s) {missing or '(none)'}", 1, path)
            cols = [header.index(n) for n in names]
            data = {n: ([], [], []) for n in names}
            seen = {}
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line, path)
                try:
                    ts = _parse_timestamp(row[t_col], schema.timestamp_format)
                except ValueError:
                    raise DataFormatError(f"unparseable timestamp {row[t_col]!r}", line, path) from None
                if ts in seen:
                    raise DataFormatError(f"duplicate timestamp {row[t_col]!r} (first seen line {seen[ts]})",
                                          line, path)
                seen[ts] = line
                for n, c in zip(names, cols):
                    data[n][0].append(ts)
                    data[n][1].append(_parse_power(row[c], line, path))
                    data[n][2].append(line)
        else:
            for col in (schema.farm_column, schema.power_column):
                if col not in header:
                    raise DataFormatError(f"missing column {col!r}", 1, path)
            f_col, p_col = header.index(schema.farm_column), header.index(schema.power_column)
            data, seen = {}, {}
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line, path)
                try:
                    ts = _parse_timestamp(row[t_col], schema.timestamp_format)
                except ValueError:
                    raise DataFormatError(f"unparseable timestamp {row[t_col]!r}", line, path) from None
                fid = row[f_col].strip()
                if (fid, ts) in seen:
                    raise DataFormatError(
                        f"duplicate timestamp {row[t_col]!r} for farm {fid} (first seen line {seen[fid, ts]})",
                        line, path)
                seen[fid, ts] = line
                bucket = data.setdefault(fid, ([], [], []))
                bucket[0].append(ts)
                bucket[1].append(_parse_power(row[p_col], line, path))
                bucket[2].append(line)
    if not data or all(len(v[0]) == 0 for v in data.values()):
        raise DataFormatError("no data rows", path=path)
    return [_assemble(fid, *vals, schema=schema, path=path) for fid, vals in data.items()]


def write_series_csv(frames: Sequence[TimeSeriesFrame], path, schema: CsvSchema = CsvSchema()):
    """Write frames in the layout described by ``schema`` (inverse of :func:`load_series_csv`)."""
    fmt = schema.timestamp_format
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if schema.layout == "wide":
            ts = frames[0].timestamps
            for f in frames[1:]:
                if not np.array_equal(f.timestamps, ts):
                    raise WindEnsembleError("wide layout requires aligned timestamps across farms")
            w.writerow([schema.timestamp_column] + [f.farm_id for f in frames])
            for i, t in enumerate(ts):
                w.writerow([_format_timestamp(t, fmt)] + [repr(float(f.power[i])) for f in frames])
        else:
            w.writerow([schema.timestamp_column, schema.farm_column, schema.power_column])
            for f in frames:
                for t, p in zip(f.timestamps, f.power):
                    w.writerow([_format_timestamp(t, fmt), f.farm_id, repr(float(p))])


def load_farm_meta(path):
    """Read ``farm_id,latitude,longitude[,capacity]`` rows."""
    path = str(path)
    farms = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"farm_id", "latitude", "longitude"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataFormatError(f"metadata header must contain {sorted(need)}", 1, path)
        for line, row in enumerate(reader, start=2):
            try:
                cap = row.get("capacity")
                farms.append(FarmMeta(row["farm_id"].strip(), float(row["latitude"]), float(row["longitude"]),
                                      float(cap) if cap not in (None, "") else None))
            except (ValueError, WindEnsembleError) as exc:
                raise DataFormatError(str(exc), line, path) from None
    ids = [f.farm_id for f in farms]
    if len(set(ids)) != len(ids):
        raise DataFormatError("farm_id values must be unique", path=path)
    return farms


def write_farm_meta(farms: Sequence[FarmMeta], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["farm_id", "latitude", "longitude", "capacity"])
        for f in farms:
            w.writerow([f.farm_id, repr(f.latitude), repr(f.longitude),
                        "" if f.capacity is None else repr(f.capacity)])


# ---------------------------------------------------------------- scaling and splitting

def normalize_minmax(frame: TimeSeriesFrame):
    """Scale power to [0, 1] using the frame's own min and max."""
    if len(frame) == 0:
        raise WindEnsembleError(f"farm {frame.farm_id}: cannot normalize an empty series")
    lo, hi = float(np.min(frame.power)), float(np.max(frame.power))
    if not lo < hi:
        raise WindEnsembleError(f"farm {frame.farm_id}: cannot normalize a constant or empty series")
    scaler = MinMaxScaler(lo, hi)
    return apply_scaler(frame, scaler), scaler


def apply_scaler(frame: TimeSeriesFrame, scaler: MinMaxScaler):
    """Scale with a scaler fitted elsewhere (e.g. on the training split)."""
    return replace(frame, power=scaler.transform(frame.power), scaler=scaler)


def denormalize(frame: TimeSeriesFrame):
    if frame.scaler is None:
        return frame
    return replace(frame, power=frame.scaler.inverse(frame.power), scaler=None)


def split_by_date(frame: TimeSeriesFrame, boundary):
    """Rows strictly before ``boundary`` go to train, the rest to test."""
    b = np.datetime64(boundary, "s")
    if len(frame) == 0 or not frame.timestamps[0] <= b <= frame.timestamps[-1]:
        raise WindEnsembleError(f"farm {frame.farm_id}: boundary {b} outside "
                                f"[{frame.timestamps[0] if len(frame) else None}, "
                                f"{frame.timestamps[-1] if len(frame) else None}]")
    cut = int(np.searchsorted(frame.timestamps, b, side="left"))
    train = replace(frame, timestamps=frame.timestamps[:cut], power=frame.power[:cut])
    test = replace(frame, timestamps=frame.timestamps[cut:], power=frame.power[cut:])
    return train, test


# ---------------------------------------------------------------- windows

def window_arrays(power, window, horizon):
    """Stacked windows: ``X[i] = power[i:i+W]``, ``y[i] = power[i+W-1+h]``.

    Returns ``(X, y, t_index)`` with ``t_index[i] = i + W - 1``.
    """
    power = np.asarray(power, dtype=np.float64)
    if window < 1 or horizon < 1:
        raise WindEnsembleError("window and horizon must be >= 1")
    need = window + horizon
    if len(power) < need:
        raise SequenceTooShortError("sliding_windows series", need, len(power))
    n = len(power) - window - horizon + 1
    X = np.lib.stride_tricks.sliding_window_view(power, window)[:n].copy()
    t_index = np.arange(n) + window - 1
    y = power[t_index + horizon].copy()
    return X, y, t_index


def sliding_windows(frame: TimeSeriesFrame, window=24, horizon=1):
    X, y, t_index = window_arrays(frame.power, window, horizon)
    return [WindowSample(frame.farm_id, X[i], float(y[i]), int(t_index[i])) for i in range(len(y))]


# ---------------------------------------------------------------- graph

def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def distance_matrix_km(farms: Sequence[FarmMeta]):
    lat = np.array([f.latitude for f in farms])
    lon = np.array([f.longitude for f in farms])
    return haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])


def build_graph(farms: Sequence[FarmMeta], k=3):
    """k-nearest-neighbor digraph under great-circle distance.

    Each farm points to its ``min(k, n-1)`` nearest other farms; equal
    distances are broken by ``farm_id``. The result does not depend on the
    order of ``farms``.
    """
    if k < 0:
        raise WindEnsembleError(f"k must be >= 0, got {k}")
    if not farms:
        raise WindEnsembleError("build_graph needs at least one farm")
    ids = [f.farm_id for f in farms]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise WindEnsembleError(f"duplicate farm_id(s) {dup}")
    nodes = tuple(sorted(farms, key=lambda f: f.farm_id))
    D = distance_matrix_km(nodes)
    kk = min(k, len(nodes) - 1)
    edges = []
    for i in range(len(nodes)):
        others = [j for j in range(len(nodes)) if j != i]
        # index order equals farm_id order, so j breaks distance ties
        others.sort(key=lambda j: (D[i, j], j))
        edges.append(tuple(others[:kk]))
    return WindFarmGraph(nodes, tuple(edges), k)


# ---------------------------------------------------------------- synthetic corpora

REGIME_KINDS = ("ar1", "trend", "threshold")


@dataclass(frozen=True)
class RegimeSpec:
    """One segment of a synthetic regime schedule.

    ``ar1``: ``x = mu + phi (x_prev - mu) + noise``.
    ``trend``: ``x = x_prev + direction * slope + noise`` with the direction
    chosen per farm at the segment start so the ramp heads through ``mu``.
    ``threshold``: AR(1) whose coefficient switches between ``phi_low`` and
    ``phi_high`` at ``mu + threshold``.
    """

    kind: str
    length: int
    phi: float = 0.8
    noise: float = 0.05
    slope: float = 0.004
    threshold: float = 0.0
    phi_low: float = 0.95
    phi_high: float = -0.5

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise WindEnsembleError(f"unknown regime kind {self.kind!r}")
        if self.length < 1:
            raise WindEnsembleError("regime length must be >= 1")


@dataclass(frozen=True)
class SyntheticConfig:
    n_farms: int = 4
    length: int = 5000
    step_seconds: int = 3600
    start: str = "2010-01-01T00:00:00"
    regimes: tuple = (RegimeSpec("ar1", 250, phi=-0.4, noise=0.08),
                      RegimeSpec("trend", 250, slope=0.004, noise=0.01))
    level: float = 0.5
    spatial_corr: float = 0.5
    corr_length_km: float = 60.0
    center: tuple = (40.0, -70.0)
    spread_deg: float = 1.0


def synthetic_farms(n, rng, center=(40.0, -70.0), spread_deg=1.0):
    width = max(2, int(math.log10(max(n, 1))) + 1)
    lat = center[0] + rng.uniform(-spread_deg, spread_deg, size=n)
    lon = center[1] + rng.uniform(-spread_deg, spread_deg, size=n)
    return [FarmMeta(f"wp{i + 1:0{width}d}", float(lat[i]), float(lon[i])) for i in range(n)]


def regime_schedule(regimes: Sequence[RegimeSpec], length):
    """Per-step index into ``regimes``, cycling through the schedule."""
    out = np.empty(length, dtype=np.int64)
    t, r = 0, 0
    while t < length:
        seg = regimes[r % len(regimes)]
        out[t:t + seg.length] = r % len(regimes)
        t += seg.length
        r += 1
    return out


def gen_synthetic(config: SyntheticConfig, seed):
    """Generate a normalized regime-switching multi-farm corpus.

    Returns ``(frames, farms, regime_labels)``; ``regime_labels[t]`` is the
    regime kind active at step ``t`` (shared by all farms). Innovations are
    correlated across farms with correlation
    ``spatial_corr * exp(-distance / corr_length_km)``.
    """
    if config.length <= 0:
        raise WindEnsembleError(f"length must be positive, got {config.length}")
    if config.n_farms < 1:
        raise WindEnsembleError("n_farms must be >= 1")
    if not 0.0 <= config.spatial_corr < 1.0:
        raise WindEnsembleError("spatial_corr must be in [0, 1)")
    if not config.regimes:
        raise WindEnsembleError("regime schedule is empty")
    rng = np.random.default_rng(seed)
    farms = synthetic_farms(config.n_farms, rng, config.center, config.spread_deg)
    n = config.n_farms
    C = np.eye(n)
    if config.spatial_corr > 0 and n > 1:
        D = distance_matrix_km(farms)
        C = (1 - config.spatial_corr) * np.eye(n) + config.spatial_corr * np.exp(-D / config.corr_length_km)
    L = np.linalg.cholesky(C)
    sched = regime_schedule(config.regimes, config.length)
    eps = rng.standard_normal((config.length, n)) @ L.T
    mu = config.level
    x = np.empty((config.length, n))
    prev = np.full(n, mu)
    direction = np.ones(n)
    for t in range(config.length):
        spec = config.regimes[sched[t]]
        if t == 0 or sched[t] != sched[t - 1]:
            direction = np.where(prev > mu, -1.0, 1.0)
        if spec.kind == "ar1":
            cur = mu + spec.phi * (prev - mu)
        elif spec.kind == "trend":
            cur = prev + direction * spec.slope
        else:
            phi = np.where(prev < mu + spec.threshold, spec.phi_low, spec.phi_high)
            cur = mu + phi * (prev - mu)
        cur = cur + spec.noise * eps[t]
        x[t] = cur
        prev = cur
    start = np.datetime64(config.start, "s")
    step = np.timedelta64(int(config.step_seconds), "s")
    ts = start + step * np.arange(config.length)
    frames = []
    for i, f in enumerate(farms):
        raw = TimeSeriesFrame(f.farm_id, ts, x[:, i], step)
        frames.append(normalize_minmax(raw)[0])
    labels = np.array([config.regimes[i].kind for i in sched])
    return frames, farms, labels
