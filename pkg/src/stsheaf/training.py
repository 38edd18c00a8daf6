"""Windowing, per-node z-scoring, Adam, early stopping and masked metrics."""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import Graph, edge_norm_weights
from .model import ModelConfig, as_tensors, forward

STD_GUARD = 1e-8
MAPE_FLOOR = 1e-3


@dataclass(frozen=True)
class NodeStats:
    mean: np.ndarray  # (N, F)
    std: np.ndarray  # (N, F)


@dataclass
class Dataset:
    """Windowed samples.

    ``inputs`` are z-scored and have missing entries filled with 0 (the node
    mean). ``targets`` stay in original units; ``mask`` marks observed targets.
    """

    inputs: np.ndarray  # (B, T, N, F)
    targets: np.ndarray  # (B, H, N, F)
    mask: np.ndarray  # (B, H, N, F) bool
    node_stats: NodeStats

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.mask[idx], self.node_stats)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 12
    patience: int = 10
    max_epochs: int = 50
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, patience and max_epochs must be positive")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or self.adam_eps <= 0:
            raise ValueError("invalid Adam hyperparameters")


# ---------------------------------------------------------------------------
# normalization and windowing


def compute_node_stats(values: np.ndarray, mask: np.ndarray | None = None) -> NodeStats:
    """Population mean/std per node and feature over observed timesteps."""
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    count = mask.sum(axis=0)
    safe = np.maximum(count, 1)
    mean = np.where(mask, values, 0.0).sum(axis=0) / safe
    # second pass removes summation rounding, so constant nodes get an exact mean
    mean = mean + np.where(mask, values - mean, 0.0).sum(axis=0) / safe
    var = (np.where(mask, values - mean, 0.0) ** 2).sum(axis=0) / safe
    std = np.sqrt(var)
    std = np.where(std < STD_GUARD, 1.0, std)
    return NodeStats(mean, std)


def zscore(x, stats: NodeStats):
    return (x - stats.mean) / stats.std


def inverse_zscore(y, stats: NodeStats):
    return y * stats.std + stats.mean


def split_sizes(n: int, fractions) -> tuple:
    """floor(train), floor(val), remainder to test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def make_windows(series, window: int, horizon: int, split=(0.7, 0.1, 0.2), mask=None):
    """Stride-1 sliding windows with a chronological train/val/test split.

    ``series`` is a (T_total, N, F) array or a :class:`~stsheaf.data.SeriesFile`.
    Node statistics come from the timesteps touched by training windows only.
    """
    if hasattr(series, "values"):
        series, mask = series.values, series.mask
    values = np.asarray(series, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(values.shape)
    total = values.shape[0]
    n_windows = total - window - horizon + 1
    if n_windows < 1:
        raise ValueError(f"series of length {total} too short for window {window} + horizon {horizon}")
    n_train, n_val, n_test = split_sizes(n_windows, split)
    train_span = n_train + window + horizon - 1 if n_train else 0
    stats = compute_node_stats(values[:train_span], mask[:train_span]) if n_train else compute_node_stats(values, mask)

    normed = np.where(mask, zscore(values, stats), 0.0)
    starts = np.arange(n_windows)
    in_idx = starts[:, None] + np.arange(window)[None, :]
    out_idx = starts[:, None] + window + np.arange(horizon)[None, :]
    full = Dataset(normed[in_idx], values[out_idx], mask[out_idx], stats)
    bounds = np.cumsum([0, n_train, n_val, n_test])
    return tuple(full.subset(slice(bounds[i], bounds[i + 1])) for i in range(3))


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    mape: float  # percent

    def to_json(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape}


def evaluate(preds, targets, mask=None, mape_floor: float = MAPE_FLOOR) -> Metrics:
    """MAE, RMSE and MAPE (percent) over observed entries, in the units given."""
    preds, targets = np.asarray(preds, dtype=float), np.asarray(targets, dtype=float)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} vs target shape {targets.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no observed elements to evaluate")
    err = (preds - targets)[mask]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    denom = np.abs(targets[mask])
    keep = denom >= mape_floor
    mape = float(np.mean(np.abs(err[keep]) / denom[keep]) * 100.0) if keep.any() else float("nan")
    return Metrics(mae, rmse, mape)


def masked_mae_loss(pred: ad.Tensor, target: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    count = float(mask.sum())
    if count == 0:
        raise ValueError("batch has no observed targets")
    m = mask.astype(float)
    err = ad.mul(ad.abs_(ad.sub(pred, np.where(mask, target, 0.0))), m)
    return ad.mul(ad.reduce_sum(err), 1.0 / count)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam, applied in place; returns ``(params, state)``."""
    b1, b2 = cfg.adam_betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


class EarlyStopping:
    """Tracks the best validation score; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.counter = 0

    def step(self, score: float, epoch: int) -> bool:
        """Record ``score``; returns True when it is a new best."""
        if score < self.best:
            self.best, self.best_epoch, self.counter = score, epoch, 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float
    lr: float
    seconds: float


@dataclass
class History:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    reached_target: bool = False

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall-clock goes to :meth:`write_timing_csv`."""
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mae", "val_mae", "lr"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_mae), repr(r.val_mae), repr(r.lr)])

    def write_timing_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.seconds:.6f}"])

    @property
    def val_curve(self):
        return [r.val_mae for r in self.records]


class NonFiniteLossError(FloatingPointError):
    pass


def predict(params, cfg: ModelConfig, ds: Dataset, g: Graph, batch_size: int = 64, w=None) -> np.ndarray:
    """De-normalized forecasts for every window in ``ds``."""
    if w is None:
        w = edge_norm_weights(g)
    out = []
    for i in range(0, len(ds), batch_size):
        y = forward(params, cfg, ds.inputs[i : i + batch_size], g, w)
        out.append(y.data)
    if not out:
        return np.zeros((0,) + ds.targets.shape[1:])
    return inverse_zscore(np.concatenate(out), ds.node_stats)


def normalized_mae(params, cfg: ModelConfig, ds: Dataset, g: Graph, w=None, batch_size: int = 64) -> float:
    """Masked MAE in z-scored units, the quantity the training loss averages."""
    preds = predict(params, cfg, ds, g, batch_size=batch_size, w=w)
    pz = zscore(preds, ds.node_stats)
    tz = zscore(ds.targets, ds.node_stats)
    return float(np.mean(np.abs(pz - tz)[ds.mask]))


def train_epoch(params, cfg, g, w, ds, tcfg, state, rng):
    order = rng.permutation(len(ds))
    total, count = 0.0, 0.0
    for i in range(0, len(order), tcfg.batch_size):
        idx = np.sort(order[i : i + tcfg.batch_size])
        mask = ds.mask[idx]
        if not mask.any():
            continue
        target = np.where(mask, zscore(ds.targets[idx], ds.node_stats), 0.0)
        leaves = as_tensors(params)
        with ad.Tape() as tape:
            pred = forward(leaves, cfg, ds.inputs[idx], g, w)
            loss = masked_mae_loss(pred, target, mask)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite training loss at step {state.step + 1}")
        grads = ad.backward(tape, loss, wrt=list(leaves.values()))
        adam_step(params, {k: grads[t] for k, t in leaves.items()}, state, tcfg)
        n = float(mask.sum())
        total += value * n
        count += n
    return total / count if count else math.nan


def train(
    params: dict,
    cfg: ModelConfig,
    g: Graph,
    train_ds: Dataset,
    val_ds: Dataset,
    tcfg: TrainConfig,
    log=None,
    target_ratio: float | None = None,
):
    """Mini-batch MAE training with early stopping on validation MAE.

    ``params`` is updated in place during training; the returned dict holds
    the best-validation copy. Epoch 0 of the history is the untrained model.
    ``train_mae`` is in z-scored units (the loss); ``val_mae`` in original units.
    With ``target_ratio`` set, training also stops once validation MAE falls to
    ``target_ratio`` times its epoch-0 value.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    w = edge_norm_weights(g)
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    history = History()
    stopper = EarlyStopping(tcfg.patience)

    t0 = time.perf_counter()
    train0 = normalized_mae(params, cfg, train_ds, g, w)
    val = evaluate(predict(params, cfg, val_ds, g, w=w), val_ds.targets, val_ds.mask).mae
    history.records.append(EpochRecord(0, train0, val, tcfg.learning_rate, time.perf_counter() - t0))
    stopper.step(val, 0)
    best = copy.deepcopy(params)

    prev_check = ad.CHECK_FINITE
    ad.CHECK_FINITE = False  # the loss check below covers the hot loop
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            t0 = time.perf_counter()
            train_mae = train_epoch(params, cfg, g, w, train_ds, tcfg, state, rng)
            val = evaluate(predict(params, cfg, val_ds, g, w=w), val_ds.targets, val_ds.mask).mae
            history.records.append(EpochRecord(epoch, train_mae, val, tcfg.learning_rate, time.perf_counter() - t0))
            if log:
                log(f"epoch {epoch:3d}  train_mae {train_mae:.4f}  val_mae {val:.4f}")
            if stopper.step(val, epoch):
                best = copy.deepcopy(params)
            if stopper.should_stop:
                history.stopped_early = True
                break
            if target_ratio is not None and val <= target_ratio * history.records[0].val_mae:
                history.reached_target = True
                break
    finally:
        ad.CHECK_FINITE = prev_check
    history.best_epoch = stopper.best_epoch
    return best, history


def horizon_metrics(preds, ds: Dataset, horizons) -> list:
    """Metrics at individual forecast steps (1-based)."""
    out = []
    for h in horizons:
        m = evaluate(preds[:, h - 1], ds.targets[:, h - 1], ds.mask[:, h - 1])
        out.append({"horizon": int(h), **m.to_json()})
    return out


def default_horizons(horizon: int) -> list:
    """Three reporting steps: 3/6/12 for H=12, every step for H <= 3."""
    if horizon <= 3:
        return list(range(1, horizon + 1))
    return sorted({max(1, horizon // 4), max(1, horizon // 2), horizon})


def write_metrics_json(path, metrics) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2))
