"""Observation tables, chronological splits, z-scoring, windowing and the
synthetic lagged-meteorology generator."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geo import Station, StationGraph, load_stations

log = logging.getLogger(__name__)

DEFAULT_POLLUTANTS = ["pm25", "pm10", "o3", "no2", "so2", "co"]
DEFAULT_MET = ["temperature", "pressure", "humidity", "wind_speed", "wind_direction"]
WIND_DIRECTION = "wind_direction"
WIND_PAIR = ("wind_direction_sin", "wind_direction_cos")
MAX_INTERP_GAP = 3


class DataError(ValueError):
    """Input data violate the ingestion schema or a precondition."""


@dataclass
class ObservationTable:
    stations: List[Station]
    timestamps: np.ndarray  # datetime64[s], strictly increasing, fixed step
    pollutants: np.ndarray  # N x K x T
    meteorology: np.ndarray  # N x C x T
    pollutant_names: List[str]
    met_names: List[str]
    step_hours: float
    load_report: Dict = field(default_factory=dict)

    def __post_init__(self):
        n, t = len(self.stations), len(self.timestamps)
        if self.pollutants.shape != (n, len(self.pollutant_names), t):
            raise DataError(f"pollutant array {self.pollutants.shape} does not match "
                            f"{n} stations x {len(self.pollutant_names)} names x {t} steps")
        if self.meteorology.shape != (n, len(self.met_names), t):
            raise DataError(f"meteorology array {self.meteorology.shape} does not match "
                            f"{n} stations x {len(self.met_names)} names x {t} steps")
        if np.isnan(self.pollutants).any() or np.isnan(self.meteorology).any():
            raise DataError("observation arrays contain NaN; impute before building a table")

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def station_ids(self) -> List[str]:
        return [s.id for s in self.stations]

    def slice(self, start: int, stop: int) -> "ObservationTable":
        return replace(self, timestamps=self.timestamps[start:stop],
                       pollutants=self.pollutants[..., start:stop],
                       meteorology=self.meteorology[..., start:stop], load_report={})


# ---------------------------------------------------------------- ingestion

def _parse_ts(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1]
    return np.datetime64(text, "s")


def format_ts(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


def _impute_series(values: np.ndarray, train_len: int) -> Tuple[np.ndarray, List[Tuple[int, int, str]]]:
    """Fill NaN runs: linear interpolation for short interior gaps, else the
    training-period median.  Returns the filled copy and (start, length, how)."""
    out = values.copy()
    isnan = np.isnan(values)
    runs = []
    t = 0
    T = len(values)
    while t < T:
        if not isnan[t]:
            t += 1
            continue
        start = t
        while t < T and isnan[t]:
            t += 1
        runs.append((start, t - start))
    if not runs:
        return out, []
    ref = values[:train_len][~isnan[:train_len]]
    if ref.size == 0:
        ref = values[~isnan]
    median = float(np.median(ref)) if ref.size else None
    events = []
    for start, length in runs:
        interior = start > 0 and start + length < T
        if interior and length <= MAX_INTERP_GAP:
            lo, hi = values[start - 1], values[start + length]
            frac = np.arange(1, length + 1) / (length + 1)
            out[start:start + length] = lo + (hi - lo) * frac
            events.append((start, length, "interpolated"))
        else:
            if median is None:
                raise DataError("a channel has no observed values at all")
            out[start:start + length] = median
            events.append((start, length, "median"))
    return out, events


def load_observations(stations_path, observations_path,
                      pollutant_names: Optional[Sequence[str]] = None,
                      met_names: Optional[Sequence[str]] = None) -> ObservationTable:
    """Read ``stations.csv`` and ``observations.csv`` into N x channel x T arrays.

    Channel names default to the six standard pollutants and five
    meteorological variables.  Empty cells and absent (station, time) rows
    are imputed; see ``load_report`` on the returned table.
    """
    stations = load_stations(stations_path)
    pollutant_names = list(pollutant_names or DEFAULT_POLLUTANTS)
    met_names = list(met_names or DEFAULT_MET)
    channels = pollutant_names + met_names
    index = {s.id: i for i, s in enumerate(stations)}
    rows: Dict[str, List[Tuple[np.datetime64, List[float], int]]] = {s.id: [] for s in stations}
    empty_cells = 0
    with open(observations_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ["station_id", "timestamp"] + channels if c not in header]
        if missing:
            raise DataError(f"{observations_path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            sid = row["station_id"]
            if sid not in index:
                raise DataError(f"{observations_path}:{lineno}: unknown station '{sid}'")
            try:
                ts = _parse_ts(row["timestamp"])
            except ValueError:
                raise DataError(f"{observations_path}:{lineno}: bad timestamp {row['timestamp']!r}") from None
            vals = []
            for c in channels:
                cell = (row[c] or "").strip()
                if cell == "":
                    vals.append(np.nan)
                    empty_cells += 1
                else:
                    vals.append(float(cell))
            prev = rows[sid][-1][0] if rows[sid] else None
            if prev is not None and ts <= prev:
                raise DataError(f"{observations_path}:{lineno}: timestamps for station '{sid}' are not increasing")
            rows[sid].append((ts, vals, lineno))

    all_ts = np.array(sorted({r[0] for rs in rows.values() for r in rs}), dtype="datetime64[s]")
    if all_ts.size == 0:
        raise DataError(f"{observations_path}: no observation rows")
    if all_ts.size > 1:
        steps = np.diff(all_ts).astype(np.int64)
        if np.any(steps != steps[0]):
            bad = int(np.argmax(steps != steps[0]))
            raise DataError(f"{observations_path}: irregular time step near {format_ts(all_ts[bad + 1])}")
        step_hours = steps[0] / 3600.0
    else:
        step_hours = 1.0
    T = all_ts.size
    pos = {ts: i for i, ts in enumerate(all_ts.tolist())}
    raw = np.full((len(stations), len(channels), T), np.nan)
    missing_rows = 0
    for sid, rs in rows.items():
        missing_rows += T - len(rs)
        for ts, vals, _ in rs:
            raw[index[sid], :, pos[ts.tolist()]] = vals

    train_len = (T * 2) // 4
    filled = np.empty_like(raw)
    report = {"empty_cells": empty_cells, "missing_row_cells": missing_rows * len(channels),
              "interpolated_cells": 0, "median_filled_cells": 0, "gaps": []}
    for n in range(len(stations)):
        for c in range(len(channels)):
            filled[n, c], events = _impute_series(raw[n, c], train_len)
            for start, length, how in events:
                report[f"{'interpolated' if how == 'interpolated' else 'median_filled'}_cells"] += length
                if how == "median":
                    report["gaps"].append({"station_id": stations[n].id, "channel": channels[c],
                                           "start": format_ts(all_ts[start]), "length": length})
    report["imputed_cells"] = report["interpolated_cells"] + report["median_filled_cells"]
    k = len(pollutant_names)
    return ObservationTable(stations, all_ts, filled[:, :k], filled[:, k:], pollutant_names, met_names,
                            float(step_hours), report)


def write_observations(path, table: ObservationTable) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "timestamp"] + table.pollutant_names + table.met_names)
        for n, st in enumerate(table.stations):
            for t in range(table.T):
                vals = list(table.pollutants[n, :, t]) + list(table.meteorology[n, :, t])
                w.writerow([st.id, format_ts(table.timestamps[t])] + [repr(float(v)) for v in vals])


def encode_wind(table: ObservationTable) -> ObservationTable:
    """Replace a ``wind_direction`` channel (degrees) by its (sin, cos) pair."""
    if WIND_DIRECTION not in table.met_names:
        return table
    c = table.met_names.index(WIND_DIRECTION)
    rad = np.deg2rad(table.meteorology[:, c])
    met = np.concatenate([table.meteorology[:, :c], np.sin(rad)[:, None], np.cos(rad)[:, None],
                          table.meteorology[:, c + 1:]], axis=1)
    names = table.met_names[:c] + list(WIND_PAIR) + table.met_names[c + 1:]
    return replace(table, meteorology=met, met_names=names)


# ---------------------------------------------------------------- splitting

def chronological_split(table: ObservationTable, ratio: Sequence[int] = (2, 1, 1),
                        tau: Optional[int] = None, kappa: Optional[int] = None) -> List[ObservationTable]:
    """Contiguous train/val/test segments; the remainder goes to the last one."""
    T = table.T
    total = sum(ratio)
    if tau is not None and kappa is not None and T < total * (tau + kappa):
        raise DataError(f"table has {T} steps; a {':'.join(map(str, ratio))} split with "
                        f"tau={tau}, kappa={kappa} needs at least {total * (tau + kappa)}")
    lengths = [(T * r) // total for r in ratio[:-1]]
    lengths.append(T - sum(lengths))
    out, start = [], 0
    for length in lengths:
        out.append(table.slice(start, start + length))
        start += length
    return out


# ---------------------------------------------------------------- normalisation

@dataclass
class NormStats:
    pollutant_mean: np.ndarray
    pollutant_std: np.ndarray
    met_mean: np.ndarray
    met_std: np.ndarray

    @classmethod
    def fit(cls, train: ObservationTable) -> "NormStats":
        if train.T == 0:
            raise DataError("cannot fit normalisation on an empty table")
        pm, ps = train.pollutants.mean(axis=(0, 2)), train.pollutants.std(axis=(0, 2))
        mm, ms = train.meteorology.mean(axis=(0, 2)), train.meteorology.std(axis=(0, 2))
        names = train.pollutant_names + train.met_names
        for name, s in zip(names, np.concatenate([ps, ms])):
            if not s > 0:
                raise DataError(f"channel '{name}' has zero variance in the training split")
        return cls(pm, ps, mm, ms)

    def apply(self, table: ObservationTable) -> ObservationTable:
        return replace(table,
                       pollutants=(table.pollutants - self.pollutant_mean[:, None]) / self.pollutant_std[:, None],
                       meteorology=(table.meteorology - self.met_mean[:, None]) / self.met_std[:, None])

    def invert(self, table: ObservationTable) -> ObservationTable:
        return replace(table,
                       pollutants=table.pollutants * self.pollutant_std[:, None] + self.pollutant_mean[:, None],
                       meteorology=table.meteorology * self.met_std[:, None] + self.met_mean[:, None])

    def denormalize_pollutants(self, x: np.ndarray, axis: int = -2) -> np.ndarray:
        """Map normalised pollutant values back to physical units; ``axis`` indexes K."""
        shape = [1] * x.ndim
        shape[axis] = -1
        return x * self.pollutant_std.reshape(shape) + self.pollutant_mean.reshape(shape)

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in
                     ("pollutant_mean", "pollutant_std", "met_mean", "met_std")))


def fit_apply_normalizer(train: ObservationTable, others: Sequence[ObservationTable] = ()):
    stats = NormStats.fit(train)
    return stats, [stats.apply(train)] + [stats.apply(t) for t in others]


# ---------------------------------------------------------------- windows

@dataclass
class WindowSample:
    past_pollutants: np.ndarray  # N x K x tau
    past_meteorology: np.ndarray  # N x C x tau
    future_pollutants: np.ndarray  # N x K x kappa
    start_index: int
    start_time: np.datetime64
    step_hours: float


def make_windows(table: ObservationTable, tau: int, kappa: int, stride: int = 1) -> List[WindowSample]:
    if tau < 1 or kappa < 1 or stride < 1:
        raise DataError(f"tau, kappa and stride must be >= 1 (got {tau}, {kappa}, {stride})")
    T = table.T
    if tau + kappa > T:
        raise DataError(f"window of {tau}+{kappa} steps is longer than the table ({T} steps)")
    out = []
    for s in range(0, T - tau - kappa + 1, stride):
        out.append(WindowSample(table.pollutants[..., s:s + tau], table.meteorology[..., s:s + tau],
                                table.pollutants[..., s + tau:s + tau + kappa], s,
                                table.timestamps[s], table.step_hours))
    return out


@dataclass
class WindowBatch:
    past_pollutants: np.ndarray  # B x N x K x tau
    past_meteorology: np.ndarray  # B x N x C x tau
    future_pollutants: np.ndarray  # B x N x K x kappa
    start_times: np.ndarray  # B, datetime64[s]
    step_hours: float

    def __len__(self):
        return self.past_pollutants.shape[0]


def stack_windows(windows: Sequence[WindowSample]) -> WindowBatch:
    if not windows:
        raise DataError("no windows to batch")
    return WindowBatch(np.stack([w.past_pollutants for w in windows]),
                       np.stack([w.past_meteorology for w in windows]),
                       np.stack([w.future_pollutants for w in windows]),
                       np.array([w.start_time for w in windows], dtype="datetime64[s]"),
                       windows[0].step_hours)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    N: int
    K: int
    C: int
    T: int
    step_hours: float
    lag_table: List[List[int]]
    coeff_table: List[List[float]]
    spatial_coupling: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    window: int = 24
    k_neighbors: int = 3
    start: str = "2024-01-17T00:00:00Z"

    def __post_init__(self):
        lags = np.asarray(self.lag_table)
        coeffs = np.asarray(self.coeff_table, dtype=float)
        if lags.shape != (self.K, self.C) or coeffs.shape != (self.K, self.C):
            raise DataError(f"lag/coeff tables must be {self.K}x{self.C}")
        if lags.min() < 0 or lags.max() >= self.window:
            raise DataError(f"planted lags must lie in [0, {self.window}); got max {lags.max()}")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        if not 0 <= self.spatial_coupling < 1:
            raise DataError("spatial_coupling must lie in [0, 1)")

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if "dt" in d and "step_hours" not in d:
            d["step_hours"] = d.pop("dt")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def names(self) -> Tuple[List[str], List[str]]:
        return [f"pol{k}" for k in range(self.K)], [f"met{c}" for c in range(self.C)]


def propagate_pollutants(drive: np.ndarray, neighbors: np.ndarray, beta: float,
                         noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Run x(t) = drive(t) + beta * mean_{nbr} x(t-1) + noise(t) over N x K x T.

    ``neighbors`` is an N x N 0/1 matrix without self-loops; stations without
    neighbours receive no spatial term.
    """
    N, K, T = drive.shape
    deg = neighbors.sum(axis=1)
    w = np.divide(neighbors, deg[:, None], out=np.zeros_like(neighbors, dtype=float), where=deg[:, None] > 0)
    x = np.zeros_like(drive)
    for t in range(T):
        x[:, :, t] = drive[:, :, t]
        if t > 0 and beta:
            x[:, :, t] += beta * (w @ x[:, :, t - 1])
        if noise is not None:
            x[:, :, t] += noise[:, :, t]
    return x


def generate_synthetic(spec: SyntheticSpec, graph: StationGraph) -> ObservationTable:
    """Sinusoid + AR(1) meteorology driving pollutants through planted lags.

    ``x_k(t) = sum_c a[k,c] m_c(t - lag[k,c]) + beta * mean_nbr x_k(t-1) + noise``.
    The first ``spec.window`` steps are generated and discarded as burn-in.
    """
    if graph.n != spec.N:
        raise DataError(f"graph has {graph.n} stations but spec asks for N={spec.N}")
    rng = np.random.default_rng(spec.seed)
    N, K, C, w = spec.N, spec.K, spec.C, spec.window
    L = spec.T + w
    t = np.arange(L, dtype=float)
    amps = rng.uniform(0.5, 1.5, size=(N, C, 2))
    periods = np.stack([rng.uniform(6.0, 12.0, size=(N, C)), rng.uniform(20.0, 60.0, size=(N, C))], axis=-1)
    phases = rng.uniform(0.0, 2 * np.pi, size=(N, C, 2))
    met = (amps[..., None] * np.sin(2 * np.pi * t / periods[..., None] + phases[..., None])).sum(axis=2)
    ar = np.zeros((N, C, L))
    shocks = rng.normal(0.0, 0.3, size=(N, C, L))
    for i in range(1, L):
        ar[:, :, i] = 0.8 * ar[:, :, i - 1] + shocks[:, :, i]
    met = met + ar

    lags = np.asarray(spec.lag_table, dtype=int)
    coeffs = np.asarray(spec.coeff_table, dtype=float)
    drive = np.zeros((N, K, L))
    for k in range(K):
        for c in range(C):
            if coeffs[k, c] == 0.0:
                continue
            d = lags[k, c]
            drive[:, k, d:] += coeffs[k, c] * met[:, c, :L - d]
    noise = rng.normal(0.0, spec.noise_std, size=(N, K, L)) if spec.noise_std > 0 else None
    nbrs = graph.adjacency() - np.eye(N)
    pol = propagate_pollutants(drive, nbrs, spec.spatial_coupling, noise)

    start = _parse_ts(spec.start)
    step = np.timedelta64(int(round(spec.step_hours * 3600)), "s")
    stamps = start + step * np.arange(spec.T)
    pnames, mnames = spec.names()
    return ObservationTable(list(graph.stations), stamps, pol[:, :, w:], met[:, :, w:], pnames, mnames,
                            float(spec.step_hours))


def random_stations(n: int, seed: int = 0, lat=(35.0, 42.0), lon=(110.0, 120.0)) -> List[Station]:
    rng = np.random.default_rng(seed)
    return [Station(f"S{i:03d}", round(float(rng.uniform(*lat)), 5), round(float(rng.uniform(*lon)), 5),
                    round(float(rng.uniform(0.0, 500.0)), 1)) for i in range(n)]
