"""Huber objective, Adam with step decay, early stopping and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from ._io import write_csv
from .analysis import MetricsReport, metrics
from .data import ConfigError, Normalizer, SeriesDataset, chronological_split, window_iter
from .model import FaST, ModelConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_mae", "lr", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    decay_factor: float = 0.5
    decay_every: int = 10
    max_epochs: int = 50
    batch_size: int = 64
    huber_delta: float = 1.0
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables global-norm clipping
    split: tuple = (0.6, 0.2, 0.2)
    normalization: str = "node"
    loss_scale: str = "normalized"  # or "raw": loss on de-normalized predictions
    time_anchor: str = "last"

    def __post_init__(self):
        for k in ("lr", "decay_factor", "decay_every", "max_epochs", "batch_size", "huber_delta"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"TrainConfig.{k} must be positive, got {getattr(self, k)}")
        if self.patience < 0:
            raise ConfigError("TrainConfig.patience must be non-negative")
        if self.loss_scale not in ("normalized", "raw"):
            raise ConfigError(f"loss_scale must be 'normalized' or 'raw', got {self.loss_scale!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


# ---------------------------------------------------------------- objective


def huber(Y, Y_hat, delta: float = 1.0) -> Tensor:
    """Element-wise Huber penalty as a differentiable tensor."""
    Y, Y_hat = tn.as_tensor(Y), tn.as_tensor(Y_hat)
    if Y.shape != Y_hat.shape:
        raise tn.ShapeError(f"huber: target shape {Y.shape} != prediction shape {Y_hat.shape}")
    r = Y_hat.data - Y.data
    quad = np.abs(r) <= delta
    out = np.where(quad, 0.5 * r * r, delta * np.abs(r) - 0.5 * delta * delta)
    dr = np.where(quad, r, delta * np.sign(r))
    return tn._make(out, (Y, Y_hat), lambda g: (-g * dr, g * dr))


def huber_loss(Y, Y_hat, delta: float = 1.0) -> Tensor:
    """Summed over nodes and horizon steps, averaged over the batch.

    Unbatched ``N x P`` inputs give the plain per-sample sum.
    """
    h = huber(Y, Y_hat, delta)
    if h.ndim <= 2:
        return tn.sum(h)
    return tn.mul(tn.sum(h), 1.0 / h.shape[0])


def lr_schedule(epoch: int, lr0: float = 0.002, factor: float = 0.5, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** (epoch // every)


# ---------------------------------------------------------------- optimizer


class Adam:
    """Bias-corrected Adam over a name -> Tensor registry."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- evaluation


def predict_split(model: FaST, norm: Normalizer, ds: SeriesDataset, rng_range, batch_size=64, time_anchor="last"):
    """De-normalized predictions and raw targets over every window of a range.

    Returns ``(Y_hat, Y, anchors)`` with shapes ``W x N x P``.
    """
    cfg = model.cfg
    nds = ds.with_values(norm.apply(ds.values))
    preds, targets, anchors = [], [], []
    for batch in window_iter(nds, rng_range, cfg.T, cfg.P, batch_size, time_anchor=time_anchor):
        preds.append(norm.invert(model.predict(batch.X, batch.tod, batch.dow)))
        targets.append(norm.invert(batch.Y))
        anchors.append(batch.anchors)
    return np.concatenate(preds), np.concatenate(targets), np.concatenate(anchors)


def persistence_forecast(ds: SeriesDataset, rng_range, T: int, P: int):
    """Baseline repeating the last observed value; returns ``(Y_hat, Y)``."""
    preds, targets = [], []
    for batch in window_iter(ds, rng_range, T, P, 256):
        preds.append(np.repeat(batch.X[..., -1:], P, axis=-1))
        targets.append(batch.Y)
    return np.concatenate(preds), np.concatenate(targets)


def evaluate(model: FaST, norm: Normalizer, ds: SeriesDataset, split: str = "test", train_cfg: TrainConfig | None = None) -> MetricsReport:
    train_cfg = train_cfg or TrainConfig()
    if ds.N != model.cfg.N:
        raise ConfigError(f"checkpoint expects N={model.cfg.N} nodes, dataset has {ds.N}")
    ranges = dict(zip(("train", "val", "test"), chronological_split(ds.T_total, train_cfg.split)))
    if split not in ranges:
        raise ConfigError(f"unknown split {split!r}")
    Y_hat, Y, _ = predict_split(model, norm, ds, ranges[split], train_cfg.batch_size, train_cfg.time_anchor)
    return metrics(Y, Y_hat)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: FaST
    normalizer: Normalizer
    train_cfg: TrainConfig
    history: list = field(default_factory=list)  # rows matching HISTORY_HEADER
    best_epoch: int = 0
    best_val_mae: float = float("inf")

    def checkpoint_extra(self) -> dict:
        return {"normalizer.mean": self.normalizer.mean, "normalizer.std": self.normalizer.std}

    def save(self, out_dir, record_seconds: bool = True) -> tuple[Path, Path]:
        """Write ``checkpoint.npz`` and ``history.csv`` under ``out_dir``."""
        out = Path(out_dir)
        ckpt = out / "checkpoint.npz"
        hist = out / "history.csv"
        meta = {"train_config": self.train_cfg.to_dict(), "best_epoch": self.best_epoch}
        self.model.save(ckpt, extra=self.checkpoint_extra(), meta=meta)
        rows = self.history if record_seconds else [r[:4] + ("",) for r in self.history]
        write_csv(hist, HISTORY_HEADER, rows)
        return ckpt, hist


def load_trained(path) -> tuple[FaST, Normalizer, TrainConfig]:
    model, extra, meta = FaST.load(path)
    norm = Normalizer(extra["normalizer.mean"], extra["normalizer.std"])
    tc = meta.get("train_config", {})
    if "split" in tc:
        tc["split"] = tuple(tc["split"])
    return model, norm, TrainConfig(**tc)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    ds: SeriesDataset,
    validate: Callable[[FaST, int], float] | None = None,
) -> TrainResult:
    """Fit on the training split, early-stopping on validation MAE.

    ``validate(model, epoch)`` overrides the validation metric (lower is better).
    """
    if ds.N != model_cfg.N:
        raise ConfigError(f"model N={model_cfg.N} but dataset has {ds.N} nodes")
    if ds.steps_per_day != model_cfg.steps_per_day:
        raise ConfigError(
            f"model steps_per_day={model_cfg.steps_per_day} but dataset granularity gives {ds.steps_per_day}"
        )
    tr, va, _ = chronological_split(ds.T_total, train_cfg.split, window=model_cfg.T + model_cfg.P)
    norm = Normalizer.fit(ds, tr, train_cfg.normalization)
    nds = ds.with_values(norm.apply(ds.values))
    model = FaST(model_cfg, seed=train_cfg.seed)
    opt = Adam(model.params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    result = TrainResult(model, norm, train_cfg)
    best_state = model.state_dict()
    bad = 0
    std_t, mean_t = norm.std[None], norm.mean[None]
    for epoch in range(train_cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, train_cfg.lr, train_cfg.decay_factor, train_cfg.decay_every)
        total, count = 0.0, 0
        for batch in window_iter(
            nds, tr, model_cfg.T, model_cfg.P, train_cfg.batch_size,
            shuffle_seed=train_cfg.seed * 100_003 + epoch, time_anchor=train_cfg.time_anchor,
        ):
            model.zero_grad()
            Y_hat, _ = model(batch.X, batch.tod, batch.dow)
            Y = batch.Y
            if train_cfg.loss_scale == "raw":
                Y_hat = Y_hat * std_t + mean_t
                Y = Y * std_t + mean_t
            loss = huber_loss(Y, Y_hat, train_cfg.huber_delta)
            loss.backward()
            if train_cfg.clip_norm > 0:
                clip_grad_norm(model.params, train_cfg.clip_norm)
            opt.step(lr)
            n = batch.X.shape[0]
            total += loss.item() * n
            count += n
        train_loss = total / count
        if validate is not None:
            val = float(validate(model, epoch))
        else:
            Y_hat, Y, _ = predict_split(model, norm, ds, va, train_cfg.batch_size, train_cfg.time_anchor)
            val = float(np.mean(np.abs(Y - Y_hat)))
        secs = time.perf_counter() - t0
        result.history.append((epoch + 1, train_loss, val, lr, secs))
        logger.info("epoch %d loss %.6g val_mae %.6g lr %g (%.1fs)", epoch + 1, train_loss, val, lr, secs)
        if val < result.best_val_mae:
            result.best_val_mae = val
            result.best_epoch = epoch + 1
            best_state = model.state_dict()
            bad = 0
        else:
            bad += 1
            if bad > train_cfg.patience:
                logger.info("early stop after epoch %d (best %d)", epoch + 1, result.best_epoch)
                break
    model.load_state_dict(best_state)
    return result


