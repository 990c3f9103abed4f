import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airpcm.geo import Station, build_station_graph, haversine_km, load_stations, write_stations


def chord_distance_km(a, b):
    """Great-circle distance from the 3-D chord between unit vectors."""
    def vec(s):
        la, lo = np.radians(s.latitude), np.radians(s.longitude)
        return np.array([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)])
    return 2 * 6371.0 * np.arcsin(np.linalg.norm(vec(a) - vec(b)) / 2)


coords = st.tuples(st.floats(-90, 90), st.floats(-180, 180))


def test_identity_distance():
    s = Station("a", 12.5, -40.0)
    assert haversine_km(s, s) == 0.0


def test_antipodal():
    assert haversine_km(Station("a", 0, 0), Station("b", 0, 180)) == pytest.approx(20015.0868, abs=1e-3)


def test_beijing_shanghai():
    d = haversine_km(Station("bj", 39.9042, 116.4074), Station("sh", 31.2304, 121.4737))
    # chord-formula oracle: 1067.31 km
    assert d == pytest.approx(1067.0, abs=1.0)
    assert d == pytest.approx(1067.3101709271289, rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(coords, coords)
def test_symmetry_and_chord_oracle(p, q):
    a, b = Station("a", *p), Station("b", *q)
    assert haversine_km(a, b) == haversine_km(b, a)
    assert haversine_km(a, b) >= 0
    assert haversine_km(a, b) == pytest.approx(chord_distance_km(a, b), abs=1e-6)


@pytest.mark.parametrize("lat,lon", [(91, 0), (-90.5, 0), (0, 180.1), (0, -181)])
def test_out_of_range(lat, lon):
    with pytest.raises(ValueError):
        Station("x", lat, lon)


def test_altitude_ignored():
    assert haversine_km(Station("a", 10, 10, 0), Station("b", 11, 10, 3000)) == \
        haversine_km(Station("a", 10, 10), Station("b", 11, 10))


def test_single_station_no_edges():
    g = build_station_graph([Station("a", 0, 0)], k=5)
    assert g.edges == ()
    np.testing.assert_array_equal(g.adjacency(), [[1.0]])


def test_collinear_tie_break():
    stations = [Station("w", 0, 0), Station("m", 0, 1), Station("e", 0, 2)]
    g = build_station_graph(stations, k=1)
    assert [(s, d) for s, d, _ in g.edges] == [(0, 1), (1, 0), (2, 1)]


def brute_force_knn(stations, k):
    out = {}
    for i, a in enumerate(stations):
        d = sorted((haversine_km(a, b), j) for j, b in enumerate(stations) if j != i)
        out[i] = {j for _, j in d[:k]}
    return out


def test_random_ten_against_brute_force():
    rng = np.random.default_rng(0)
    stations = [Station(f"s{i}", rng.uniform(20, 50), rng.uniform(90, 130)) for i in range(10)]
    g = build_station_graph(stations, k=3)
    oracle = brute_force_knn(stations, 3)
    for i in range(10):
        nbrs = {d for s, d, _ in g.edges if s == i}
        assert len(nbrs) == 3
        assert nbrs == oracle[i]
    for s, d, dist in g.edges:
        assert s != d
        assert dist == pytest.approx(haversine_km(stations[s], stations[d]), abs=1e-9)
    assert list(g.edges) == sorted(g.edges, key=lambda e: (e[0], e[1]))


@pytest.mark.parametrize("n,k", [(2, 5), (4, 3), (6, 1), (7, 6)])
def test_out_degree_regular(n, k):
    rng = np.random.default_rng(n)
    stations = [Station(f"s{i}", rng.uniform(-60, 60), rng.uniform(-170, 170)) for i in range(n)]
    g = build_station_graph(stations, k)
    deg = np.bincount([s for s, _, _ in g.edges], minlength=n)
    assert np.all(deg == min(k, n - 1))


def test_permutation_covariance():
    rng = np.random.default_rng(5)
    stations = [Station(f"s{i}", rng.uniform(20, 50), rng.uniform(90, 130)) for i in range(9)]
    perm = rng.permutation(9)
    g = build_station_graph(stations, 3)
    gp = build_station_graph([stations[i] for i in perm], 3)
    inv = np.argsort(perm)
    relabeled = sorted((int(inv[s]), int(inv[d])) for s, d, _ in g.edges)
    assert relabeled == sorted((s, d) for s, d, _ in gp.edges)


def test_symmetric_closure():
    stations = [Station("a", 0, 0), Station("b", 0, 1), Station("c", 0, 5)]
    g = build_station_graph(stations, k=1)
    adj = g.adjacency()
    assert adj[1, 2] == 1 and adj[2, 1] == 1  # c -> b closed to b -> c
    directed = build_station_graph(stations, k=1, symmetric=False).adjacency()
    assert directed[1, 2] == 0


def test_duplicate_ids_and_empty():
    with pytest.raises(ValueError, match="duplicate"):
        build_station_graph([Station("a", 0, 0), Station("a", 1, 1)], 1)
    with pytest.raises(ValueError, match="empty"):
        build_station_graph([], 1)


def test_csv_round_trip(tmp_path):
    stations = [Station("a", 1.5, 2.25, 30.0), Station("b", -3.0, 170.0)]
    write_stations(tmp_path / "stations.csv", stations)
    assert load_stations(tmp_path / "stations.csv") == stations
