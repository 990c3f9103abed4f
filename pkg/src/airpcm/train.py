"""Loss, Adam with global-norm clipping, and the early-stopping training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as tn
from .data import WindowBatch, WindowSample, stack_windows
from .model import AirPCM
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 50
    early_stop_patience: int = 5
    grad_clip_norm: float = 5.0
    seed: int = 0
    train_stride: int = 1
    val_stride: Optional[int] = None

    def __post_init__(self):
        for name in ("learning_rate", "epsilon", "batch_size", "max_epochs", "early_stop_patience",
                     "grad_clip_norm", "train_stride"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.early_stop_patience > self.max_epochs:
            raise ValueError("early_stop_patience cannot exceed max_epochs")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["beta1"], d["beta2"] = d.pop("betas")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def loss_mae(pred: Tensor, target) -> Tensor:
    target = tn.as_tensor(target)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"loss_mae: prediction {pred.shape} vs target {target.shape}")
    loss = tn.mean(tn.tabs(pred - target))
    tn._assert_finite(loss.data, "loss")
    return loss


class AdamState:
    def __init__(self):
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.
    Returns the norm before clipping."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


def adam_step(params: Sequence[Parameter], cfg: TrainConfig, state: AdamState, step_index: int) -> float:
    """One bias-corrected Adam update (after clipping); returns the pre-clip norm."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {getattr(p, 'name', '?')} has no gradient")
    norm = clip_gradients(params, cfg.grad_clip_norm)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step_index
    c2 = 1.0 - b2 ** step_index
    for p in params:
        key = p.name
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * state.v[key] + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        p.data = p.data - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    state.step = step_index
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_mae: float = float("inf")
    stopped_early: bool = False
    seconds: float = 0.0

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mae"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae)])


def predict_windows(model: AirPCM, windows: Sequence[WindowSample], batch_size: int = 64,
                    with_attention: bool = False):
    """Evaluation-mode forecasts for many windows, (W, N, K, kappa)."""
    preds, maps = [], []
    with tn.finite_checks(False):
        for i in range(0, len(windows), batch_size):
            batch = stack_windows(windows[i:i + batch_size])
            pred, attn = model.forward(batch)
            preds.append(pred.data)
            if with_attention:
                maps.append(attn)
    out = np.concatenate(preds, axis=0)
    if with_attention:
        return out, np.concatenate(maps, axis=0)
    return out


def validation_mae(model: AirPCM, windows: Sequence[WindowSample], batch_size: int = 64) -> float:
    pred = predict_windows(model, windows, batch_size)
    true = np.stack([w.future_pollutants for w in windows])
    return float(np.mean(np.abs(pred - true)))


def train_step(model: AirPCM, batch: WindowBatch, cfg: TrainConfig, state: AdamState,
               rng: np.random.Generator, training: bool = True) -> float:
    params = model.parameters()
    model.zero_grad()
    try:
        pred, _ = model.forward(batch, training=training, rng=rng)
        loss = tn.mean(tn.tabs(pred - Tensor(batch.future_pollutants)))
    except tn.NonFiniteError as exc:
        raise DivergenceError(f"non-finite values at step {state.step + 1}: {exc}") from exc
    if not np.isfinite(loss.data):
        raise DivergenceError(f"loss became non-finite at step {state.step + 1}")
    tn.backward(loss, params)
    adam_step(params, cfg, state, state.step + 1)
    return float(loss.data)


def train(model: AirPCM, train_windows: Sequence[WindowSample], val_windows: Sequence[WindowSample],
          cfg: TrainConfig, progress=None) -> TrainingLog:
    """Mini-batch Adam over shuffled windows with early stopping on validation MAE.

    On return ``model`` holds the best-validation weights.
    """
    if not train_windows or not val_windows:
        raise ValueError("training needs non-empty train and validation windows")
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    record = TrainingLog()
    best = {k: p.data.copy() for k, p in model.params.items()}
    since_best = 0
    t0 = time.time()
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_windows))
        losses = []
        with tn.finite_checks(False):
            for i in range(0, len(order), cfg.batch_size):
                batch = stack_windows([train_windows[j] for j in order[i:i + cfg.batch_size]])
                losses.append(train_step(model, batch, cfg, state, drop_rng) * len(batch))
        train_loss = float(np.sum(losses) / len(order))
        val = validation_mae(model, val_windows)
        if not np.isfinite(train_loss) or not np.isfinite(val):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        record.epochs.append(EpochRecord(epoch, train_loss, val))
        log.info("epoch %d train_loss %.5f val_mae %.5f", epoch, train_loss, val)
        if progress:
            progress(epoch, train_loss, val)
        if val < record.best_val_mae:
            record.best_val_mae, record.best_epoch = val, epoch
            best = {k: p.data.copy() for k, p in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                record.stopped_early = True
                break
    for k, p in model.params.items():
        p.data = best[k]
    record.seconds = time.time() - t0
    return record
