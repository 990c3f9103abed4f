"""Station coordinates and the k-nearest-neighbour transport graph."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class Station:
    id: str
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"station {self.id}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"station {self.id}: longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class StationGraph:
    stations: Tuple[Station, ...]
    edges: Tuple[Tuple[int, int, float], ...]
    k: int
    symmetric: bool = True
    _adj: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.stations)

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 matrix ``A[i, j]``: station i aggregates from station j.

        Self-loops are always present; with ``symmetric`` the k-NN edges are
        closed under reversal.
        """
        if self._adj is not None:
            return self._adj
        a = np.eye(self.n)
        for src, dst, _ in self.edges:
            a[src, dst] = 1.0
            if self.symmetric:
                a[dst, src] = 1.0
        object.__setattr__(self, "_adj", a)
        return a


def haversine_km(a: Station, b: Station) -> float:
    """Great-circle distance on a sphere of radius 6371 km; altitude ignored."""
    lat1, lon1 = math.radians(a.latitude), math.radians(a.longitude)
    lat2, lon2 = math.radians(b.latitude), math.radians(b.longitude)
    # symmetric in (a, b): every term is invariant under swapping endpoints
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin(abs(lon2 - lon1) / 2) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def build_station_graph(stations: Sequence[Station], k: int = 5, symmetric: bool = True) -> StationGraph:
    """Directed k-NN graph by haversine distance, ties to the lower index."""
    if not stations:
        raise ValueError("cannot build a graph from an empty station list")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate station ids: {dup}")
    n = len(stations)
    k_eff = min(k, n - 1)
    edges: List[Tuple[int, int, float]] = []
    for i in range(n):
        dists = [(haversine_km(stations[i], stations[j]), j) for j in range(n) if j != i]
        dists.sort()
        for d, j in dists[:k_eff]:
            edges.append((i, j, d))
    edges.sort(key=lambda e: (e[0], e[1]))
    return StationGraph(tuple(stations), tuple(edges), k, symmetric)


def load_stations(path) -> List[Station]:
    """Read ``station_id,latitude,longitude,altitude`` rows."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"station_id", "latitude", "longitude"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            alt = row.get("altitude") or "0"
            out.append(Station(row["station_id"], float(row["latitude"]), float(row["longitude"]), float(alt)))
    return out


def write_stations(path, stations: Sequence[Station]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "latitude", "longitude", "altitude"])
        for s in stations:
            w.writerow([s.id, repr(s.latitude), repr(s.longitude), repr(s.altitude)])
