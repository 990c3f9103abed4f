"""Forecast error metrics, sudden-change flags and the historical-average baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

SUDDEN_LEVEL = 75.0  # ug/m3
SUDDEN_JUMP = 20.0  # ug/m3
SUDDEN_HORIZON_HOURS = 3.0


def mae(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - true)))


def rmse(pred: np.ndarray, true: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def smape(pred: np.ndarray, true: np.ndarray) -> float:
    """Ratio form in [0, 2]; a term is 0 where prediction and truth are both 0."""
    denom = (np.abs(pred) + np.abs(true)) / 2.0
    diff = np.abs(pred - true)
    terms = np.divide(diff, denom, out=np.zeros_like(diff, dtype=float), where=denom > 0)
    return float(np.mean(terms))


def _triplet(pred: np.ndarray, true: np.ndarray) -> Optional[dict]:
    if pred.size == 0:
        return None
    s = smape(pred, true)
    return {"mae": mae(pred, true), "rmse": rmse(pred, true), "smape": s, "smape_percent": 100.0 * s,
            "count": int(pred.size)}


@dataclass
class MetricsReport:
    pollutant_names: List[str]
    overall: dict
    per_pollutant: Dict[str, dict]
    sudden: Optional[dict]
    sudden_per_pollutant: Dict[str, Optional[dict]]
    horizon_mae: List[float]
    horizon_mae_per_pollutant: Dict[str, List[float]]
    window_count: int
    sudden_count: int
    notes: List[str] = field(default_factory=lambda: [
        "SMAPE term is 0 when |prediction| + |truth| == 0",
        "sudden-change metrics use flagged (station, target step) pairs only",
        "values in physical units",
    ])
    baseline: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_metrics(pred: np.ndarray, true: np.ndarray, sudden_flags: Optional[np.ndarray] = None,
                     pollutant_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """MAE / RMSE / SMAPE over forecasts shaped (..., N, K, kappa).

    ``sudden_flags`` is a boolean array shaped like ``pred`` without the K
    axis, i.e. (..., N, kappa): a flagged (station, step) contributes all of
    its pollutants to the sudden-change subset.
    """
    pred = np.asarray(pred, dtype=float)
    true = np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {true.shape}")
    if pred.ndim < 3:
        raise ValueError(f"expected (..., N, K, kappa) arrays, got {pred.shape}")
    if pred.ndim == 3:
        pred, true = pred[None], true[None]
        if sudden_flags is not None:
            sudden_flags = np.asarray(sudden_flags)[None]
    K = pred.shape[-2]
    names = list(pollutant_names or [f"pol{k}" for k in range(K)])
    per = {names[k]: _triplet(pred[..., k, :], true[..., k, :]) for k in range(K)}
    err = np.abs(pred - true)
    horizon = err.mean(axis=tuple(range(err.ndim - 1))).tolist()
    horizon_k = {names[k]: err[..., k, :].mean(axis=tuple(range(err.ndim - 2))).tolist() for k in range(K)}

    sudden, sudden_k, count = None, {n: None for n in names}, 0
    if sudden_flags is not None:
        flags = np.asarray(sudden_flags, dtype=bool)
        expected = pred.shape[:-2] + pred.shape[-1:]
        if flags.shape != expected:
            raise ValueError(f"sudden flags shape {flags.shape} should be {expected}")
        count = int(flags.sum())
        sel = np.broadcast_to(np.expand_dims(flags, -2), pred.shape)
        sudden = _triplet(pred[sel], true[sel])
        sudden_k = {names[k]: _triplet(pred[..., k, :][flags], true[..., k, :][flags]) for k in range(K)}
    return MetricsReport(names, _triplet(pred, true), per, sudden, sudden_k, horizon, horizon_k,
                         int(np.prod(pred.shape[:-3])) if pred.ndim > 3 else 1, count)


def detect_sudden_changes(series: np.ndarray, step_hours: float, level: float = SUDDEN_LEVEL,
                          jump: float = SUDDEN_JUMP, horizon_hours: float = SUDDEN_HORIZON_HOURS) -> np.ndarray:
    """Flag t where series(t) > level and some |series(t+d) - series(t)| > jump
    for 1 <= d <= h steps, h = max(1, round(horizon_hours / step_hours)).

    ``series`` is (T,) or (N, T); steps without a full lookahead are unflagged.
    """
    x = np.asarray(series, dtype=float)
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("sudden-change detection needs a non-empty series")
    h = max(1, int(round(horizon_hours / step_hours)))
    T = x.shape[-1]
    flags = np.zeros(x.shape, dtype=bool)
    if T <= h:
        return flags
    base = x[..., :T - h]
    moves = np.stack([np.abs(x[..., d:T - h + d] - base) for d in range(1, h + 1)], axis=0).max(axis=0)
    flags[..., :T - h] = (base > level) & (moves > jump)
    return flags


def historical_average(past_pollutants: np.ndarray, kappa: int) -> np.ndarray:
    """Repeat the mean of the past window: (..., K, tau) -> (..., K, kappa)."""
    m = np.asarray(past_pollutants).mean(axis=-1, keepdims=True)
    return np.repeat(m, kappa, axis=-1)
