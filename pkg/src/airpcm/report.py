"""File outputs: causal-attention CSV and heatmaps, forecast CSV, metric curves.

Figures are written with the non-interactive Agg backend and fixed SVG
metadata so repeated runs produce identical files.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .model import CausalAttentionMap  # noqa: E402

log = logging.getLogger(__name__)

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "svg.hashsalt": "airpcm",
    "svg.fonttype": "none",
}
SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "svg"
    meta = SVG_META if fmt == "svg" else ({"Software": None} if fmt == "png" else None)
    fig.savefig(path, format=fmt, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def causal_rows(cmap: CausalAttentionMap) -> List[list]:
    """``station_id, pollutant, met_variable, lag_hours, weight`` rows after
    merging the wind-direction pair."""
    m = cmap.merged()
    N, K, C, omega = m.weights.shape
    if len(m.station_ids) != N or len(m.pollutant_names) != K or len(m.met_names) != C:
        raise ValueError(f"label lengths ({len(m.station_ids)}, {len(m.pollutant_names)}, {len(m.met_names)}) "
                         f"do not match attention map {m.weights.shape[:3]}")
    rows = []
    for n in range(N):
        for k in range(K):
            for c in range(C):
                for j in range(omega):
                    rows.append([m.station_ids[n], m.pollutant_names[k], m.met_names[c],
                                 (omega - 1 - j) * m.step_hours, float(m.weights[n, k, c, j])])
    return rows


def heatmap_grid(cmap: CausalAttentionMap, station: int) -> np.ndarray:
    """K x C x omega weights of one station, columns ordered by increasing lag."""
    return cmap.merged().weights[station][..., ::-1]


def plot_causal_heatmap(cmap: CausalAttentionMap, station: int, path) -> Path:
    m = cmap.merged()
    grid = heatmap_grid(cmap, station)
    K = grid.shape[0]
    omega = grid.shape[-1]
    lag_hours = np.arange(omega) * m.step_hours
    vmax = float(grid.max()) if grid.max() > 0 else 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(K, 1, figsize=(max(4.0, 0.22 * omega + 1.5), 0.35 * len(m.met_names) * K + 0.8 * K),
                                 squeeze=False)
        for k in range(K):
            ax = axes[k, 0]
            im = ax.imshow(grid[k], aspect="auto", cmap="viridis", vmin=0.0, vmax=vmax, interpolation="nearest")
            ax.set_yticks(range(len(m.met_names)))
            ax.set_yticklabels(m.met_names)
            step = max(1, omega // 8)
            ax.set_xticks(range(0, omega, step))
            ax.set_xticklabels([f"{h:g}" for h in lag_hours[::step]])
            ax.set_title(f"{m.station_ids[station]} / {m.pollutant_names[k]}")
        axes[-1, 0].set_xlabel("lag (hours)")
        fig.colorbar(im, ax=axes[:, 0].tolist(), label="attention mass")
        return _save(fig, Path(path))


def export_causal_attention(cmap: CausalAttentionMap, csv_path, svg_dir=None) -> dict:
    """Write the long-format CSV and, optionally, one SVG heatmap per station."""
    rows = causal_rows(cmap)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "pollutant", "met_variable", "lag_hours", "weight"])
        for r in rows:
            w.writerow(r[:3] + [f"{r[3]:g}", repr(r[4])])
    figures = []
    if svg_dir is not None:
        for n, sid in enumerate(cmap.station_ids):
            figures.append(str(plot_causal_heatmap(cmap, n, Path(svg_dir) / f"causal_{sid}.svg")))
    return {"csv": str(csv_path), "rows": len(rows), "figures": figures}


def write_forecast_csv(path, station_ids: Sequence[str], pollutant_names: Sequence[str],
                       timestamps: Sequence[str], values: np.ndarray) -> None:
    """``values`` is N x K x kappa in physical units."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "pollutant", "timestamp", "predicted_value"])
        for n, sid in enumerate(station_ids):
            for k, pol in enumerate(pollutant_names):
                for t, ts in enumerate(timestamps):
                    w.writerow([sid, pol, ts, repr(float(values[n, k, t]))])


def plot_horizon_mae(report: dict, step_hours: float, path, baseline: Optional[dict] = None) -> Path:
    """Per-horizon-step MAE, one line per pollutant (and the baseline overall)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for name, curve in report["horizon_mae_per_pollutant"].items():
            hours = (np.arange(len(curve)) + 1) * step_hours
            ax.plot(hours, curve, marker="o", ms=2.5, lw=1.2, label=name)
        if baseline is not None:
            curve = baseline["horizon_mae"]
            ax.plot((np.arange(len(curve)) + 1) * step_hours, curve, "k--", lw=1.0, label="historical avg")
        ax.set_xlabel("forecast horizon (hours)")
        ax.set_ylabel("MAE")
        ax.legend(frameon=False, fontsize=7)
        ax.grid(alpha=0.3)
        return _save(fig, Path(path))


def plot_training_curve(epochs: Sequence[int], train_loss: Sequence[float], val_mae: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(epochs, train_loss, marker="o", ms=3, label="train loss")
        ax.plot(epochs, val_mae, marker="s", ms=3, label="val MAE")
        ax.set_xlabel("epoch")
        ax.set_ylabel("normalised MAE")
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        return _save(fig, Path(path))


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default), encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")
