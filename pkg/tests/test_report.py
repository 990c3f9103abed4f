import csv

import numpy as np
import pytest

from airpcm.model import CausalAttentionMap
from airpcm.report import (causal_rows, export_causal_attention, heatmap_grid, plot_horizon_mae,
                           plot_training_curve, write_forecast_csv)


def cmap(N=2, K=2, omega=4, seed=0):
    rng = np.random.default_rng(seed)
    names = ["temperature", "wind_direction_sin", "wind_direction_cos"]
    w = rng.random((N, K, 3, omega))
    w /= w.sum(axis=(-1, -2), keepdims=True)
    return CausalAttentionMap(w, [f"S{i}" for i in range(N)], ["pm25", "o3"][:K], names, 3.0)


def test_rows_and_lag_hours(tmp_path):
    m = cmap()
    info = export_causal_attention(m, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["station_id", "pollutant", "met_variable", "lag_hours", "weight"]
    assert len(rows) - 1 == info["rows"] == 2 * 2 * 2 * 4
    first = rows[1:5]
    assert [r[3] for r in first] == ["9", "6", "3", "0"]  # (omega - 1 - j) * step
    wind = [r for r in rows[1:] if r[0] == "S0" and r[1] == "pm25" and r[2] == "wind_direction"]
    expected = m.weights[0, 0, 1] + m.weights[0, 0, 2]
    np.testing.assert_allclose([float(r[4]) for r in wind], expected, rtol=0, atol=0)
    per_pair = {}
    for r in rows[1:]:
        per_pair[(r[0], r[1])] = per_pair.get((r[0], r[1]), 0.0) + float(r[4])
    assert all(abs(v - 1) < 1e-9 for v in per_pair.values())


def test_heatmap_grid_orders_lags_ascending():
    m = cmap()
    g = heatmap_grid(m, 1)
    assert g.shape == (2, 2, 4)
    np.testing.assert_array_equal(g[0, 0], m.weights[1, 0, 0, ::-1])


def test_svg_deterministic(tmp_path):
    m = cmap()
    a = export_causal_attention(m, tmp_path / "a" / "c.csv", tmp_path / "a")
    b = export_causal_attention(m, tmp_path / "b" / "c.csv", tmp_path / "b")
    assert len(a["figures"]) == 2
    for fa, fb in zip(a["figures"], b["figures"]):
        assert open(fa, "rb").read() == open(fb, "rb").read()
        assert open(fa).read().lstrip().startswith("<?xml")


def test_label_mismatch():
    m = cmap()
    m.station_ids = ["only-one"]
    with pytest.raises(ValueError, match="label"):
        causal_rows(m)


def test_forecast_csv(tmp_path):
    vals = np.arange(2 * 1 * 3, dtype=float).reshape(2, 1, 3)
    write_forecast_csv(tmp_path / "f.csv", ["a", "b"], ["pm25"], ["t1", "t2", "t3"], vals)
    rows = list(csv.reader(open(tmp_path / "f.csv")))
    assert rows[0] == ["station_id", "pollutant", "timestamp", "predicted_value"]
    assert rows[4] == ["b", "pm25", "t1", "3.0"]


def test_curves(tmp_path):
    rep = {"horizon_mae_per_pollutant": {"pm25": [1.0, 2.0], "o3": [0.5, 0.7]}}
    p = plot_horizon_mae(rep, 3.0, tmp_path / "h.svg", {"horizon_mae": [2.0, 2.5]})
    assert p.exists() and p.stat().st_size > 0
    q = plot_training_curve([1, 2, 3], [1.0, 0.8, 0.7], [1.1, 0.9, 0.95], tmp_path / "t.png")
    assert q.read_bytes()[:4] == b"\x89PNG"
