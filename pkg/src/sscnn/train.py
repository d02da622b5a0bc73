"""L2 training with Adam, early stopping and MSE/MAE evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import Normalizer, WindowSet, fit_normalizer, make_windows, split_bounds
from .model import ModelConfig, ModelParams, forward, init_params, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_mse", "val_mse", "val_mae", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last good parameters."""

    def __init__(self, message: str, params: ModelParams, history: list[dict]):
        super().__init__(message)
        self.params = params
        self.history = history
        self.normalizer = None


def _check_shapes(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def mse(pred, target) -> float:
    pred, target = _check_shapes(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = _check_shapes(pred, target)
    return float(np.mean(np.abs(pred - target)))


def mse_loss(pred: nc.Tensor, target: np.ndarray) -> nc.Tensor:
    if pred.shape != np.shape(target):
        raise ValueError(f"prediction shape {pred.shape} != target shape {np.shape(target)}")
    diff = pred - target
    return nc.tmean(diff * diff)


class Adam:
    """Adam with bias-corrected moments over a fixed list of arrays."""

    def __init__(self, shapes, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = nc.parameters_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def gradients(window: np.ndarray, target: np.ndarray, cfg: ModelConfig,
              params: ModelParams) -> tuple[float, list[np.ndarray]]:
    """Loss and one gradient array per parameter tensor (zeros where unused)."""
    with nc.Tape() as tape:
        pred, _ = forward(window, cfg, params)
        loss = mse_loss(pred, target)
    grads = nc.backward(tape, loss)
    return float(loss.value), [grads.get(t, np.zeros(t.shape)).copy() for t in params.tensors()]


def batched_predict(ws: WindowSet, cfg: ModelConfig, params: ModelParams,
                    chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    preds, targets = [], []
    for lo in range(0, len(ws), chunk):
        x, y = ws.batch(np.arange(lo, min(lo + chunk, len(ws))))
        preds.append(predict(x, cfg, params))
        targets.append(y)
    return np.concatenate(preds), np.concatenate(targets)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    normalizer: Normalizer | None = None
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def train(train_ws: WindowSet, val_ws: WindowSet, cfg: ModelConfig, tcfg: TrainConfig,
          params: ModelParams | None = None) -> TrainResult:
    """Minimise MSE on (already normalised) windows; keep the best-validation parameters."""
    if len(train_ws) < 1:
        raise ValueError("no training windows")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, seed=tcfg.seed) if params is None else params
    tensors = params.tensors()
    opt = Adam([t.shape for t in tensors], tcfg.learning_rate, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    best, best_score, best_epoch, bad_epochs = params.copy(), np.inf, 0, 0
    history: list[dict] = []
    stopped = False
    for epoch in range(1, tcfg.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_ws))
        losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            x, y = train_ws.batch(order[lo:lo + tcfg.batch_size])
            # overflow shows up as a non-finite loss or a non-positive AttnNorm variance
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = gradients(x, y, cfg, params)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}: {exc}", best, history) from exc
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best, history)
            clip_by_global_norm(grads, tcfg.clip_norm)
            opt.step([t.value for t in tensors], grads)
            losses.append(loss)
        train_mse = float(np.mean(losses))
        if len(val_ws):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    pred, target = batched_predict(val_ws, cfg, params)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite validation values at epoch {epoch}: {exc}",
                                       best, history) from exc
            val_mse, val_mae = mse(pred, target), mae(pred, target)
        else:
            val_mse, val_mae = train_mse, float("nan")
        history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse,
                        "val_mae": val_mae, "seconds": time.perf_counter() - started})
        log.info("epoch %d train_mse %.6f val_mse %.6f", epoch, train_mse, val_mse)
        if not np.isfinite(val_mse):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", best, history)
        if val_mse < best_score:
            best, best_score, best_epoch, bad_epochs = params.copy(), val_mse, epoch, 0
        else:
            bad_epochs += 1
            if bad_epochs >= tcfg.patience:
                stopped = True
                break
    return TrainResult(best, history, best_epoch, stopped_early=stopped)


def fit(values: np.ndarray, cfg: ModelConfig, tcfg: TrainConfig, split=(0.7, 0.1, 0.2)) -> TrainResult:
    """Normalise with train-split statistics, window, and train."""
    lo, hi = split_bounds(values.shape[1], split)[0]
    normalizer = fit_normalizer(values[:, lo:hi])
    train_ws, val_ws, _ = make_windows(normalizer.apply(values), cfg.t_in, cfg.t_out, split,
                                       require=(True, False, False))
    try:
        result = train(train_ws, val_ws, cfg, tcfg)
    except TrainingDiverged as exc:
        exc.normalizer = normalizer
        raise
    result.normalizer = normalizer
    return result


def evaluate(ws: WindowSet, cfg: ModelConfig, params: ModelParams,
             normalizer: Normalizer) -> dict[str, float]:
    """Metrics on de-normalised values, plus the normalised-scale pair."""
    if len(ws) < 1:
        raise ValueError("no evaluation windows")
    pred, target = batched_predict(ws, cfg, params)
    pred_raw, target_raw = normalizer.invert(pred), normalizer.invert(target)
    return {"mse": mse(pred_raw, target_raw), "mae": mae(pred_raw, target_raw),
            "mse_normalized": mse(pred, target), "mae_normalized": mae(pred, target),
            "windows": len(ws)}


def write_history(path, history: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in HISTORY_COLUMNS})


def seasonal_naive(window: np.ndarray, t_out: int, cycle: int) -> np.ndarray:
    """Repeat the last observed cycle: ``y[t_in + i] = y[t_in + i - cycle * ceil((i + 1) / cycle)]``."""
    t_in = window.shape[-1]
    if cycle > t_in:
        raise ValueError("cycle longer than the input window")
    i = np.arange(t_out)
    src = t_in + i - cycle * ((i // cycle) + 1)
    return window[..., src]
