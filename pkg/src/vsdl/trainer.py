"""Mini-batch Adam training with validation-loss early stopping."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamState, adam_step, backward, bce_loss, no_grad
from .datapipe import SliceStack
from .errors import ConfigError, InputError, NumericError
from .evalkit import auc, roc
from .netblocks import ModelKind, Network, timesteps

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 5
    max_epochs: int = 1000
    early_stop_patience: int = 50
    early_stop_metric: str = "val_loss"
    min_delta: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must all be >= 1")
        if self.early_stop_metric != "val_loss":
            raise ConfigError("only val_loss is supported as the early-stopping metric")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be >= 0")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d or {}) - known
        if extra:
            raise ConfigError(f"unknown training options: {sorted(extra)}")
        cfg = cls(**(d or {}))
        cfg.validate()
        return cfg


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    model: str = ""
    timesteps: int = 0

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.records])) if self.records else 0.0

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        cols = ["epoch", "train_loss", "val_loss", "val_auc"] + (["seconds"] if include_time else [])
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            row = [r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_auc)]
            if include_time:
                row.append(f"{r.seconds:.6f}")
            w.writerow(row)
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path, model: str = "", timesteps: int = 0) -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recs = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                            float(r["val_auc"]), float(r.get("seconds") or 0.0)) for r in rows]
        best = min(recs, key=lambda r: (r.val_loss, r.epoch)).epoch if recs else 0
        return cls(recs, best, len(recs), model, timesteps)


def stack_arrays(stacks: Sequence[SliceStack]) -> tuple[np.ndarray, np.ndarray]:
    if not stacks:
        raise InputError("empty split")
    if any(s.label is None for s in stacks):
        raise InputError("every training stack needs a label")
    x = np.stack([np.asarray(s.slices, dtype=np.float32) for s in stacks])
    y = np.array([int(s.label) for s in stacks], dtype=np.int64)
    return x, y


def predict_scores(net: Network, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(net.predict(x[i:i + batch_size]))
    return np.concatenate(out).astype(np.float64)


def mean_bce(scores: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(scores, 1e-7, 1 - 1e-7)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log1p(-p)))


class Optimizer:
    """Per-parameter Adam states sharing one step counter."""

    def __init__(self, net: Network, config: TrainConfig):
        self.net = net
        self.states = {name: AdamState.fresh(p, config.learning_rate, config.beta1,
                                             config.beta2, config.epsilon)
                       for name, p in net.parameters.items()}

    def fit_batch(self, xb: np.ndarray, yb: np.ndarray) -> float:
        """One forward/backward pass and one Adam update; returns the batch loss."""
        for p in self.net.parameters.values():
            p.grad = None
        loss = bce_loss(self.net.forward(xb), yb)
        value = loss.item()
        if not math.isfinite(value):
            return value
        backward(loss)
        for name, p in self.net.parameters.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, self.states[name])
        return value


def train(net: Network, train_set: Sequence[SliceStack], val_set: Sequence[SliceStack],
          config: TrainConfig | None = None) -> tuple[Network, TrainHistory]:
    """Train ``net`` in place and restore the weights of the best validation epoch."""
    config = config or TrainConfig()
    config.validate()
    xt, yt = stack_arrays(train_set)
    xv, yv = stack_arrays(val_set)
    side = net.spec.input_side
    if xt.shape[2:] != (side, side) or xv.shape[2:] != (side, side):
        raise InputError(f"stacks are {xt.shape[2:]}, network expects {side}x{side}")

    opt = Optimizer(net, config)
    rng = np.random.default_rng(config.seed)
    hist = TrainHistory(model=net.kind.value, timesteps=timesteps(net.spec))
    best_loss = math.inf
    best_state = net.state()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(xt))
        losses, sizes = [], []
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            value = opt.fit_batch(xt[idx], yt[idx])
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {bi + 1}")
            losses.append(value)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        scores = predict_scores(net, xv)
        if not np.all(np.isfinite(scores)):
            raise NumericError(f"non-finite validation output at epoch {epoch}")
        val_loss = mean_bce(scores, yv)
        val_auc = auc(roc(scores, yv)) if 0 < yv.sum() < len(yv) else math.nan
        seconds = time.perf_counter() - t0
        hist.records.append(EpochRecord(epoch, train_loss, val_loss, val_auc, seconds))
        log.info("%s epoch %d train %.4f val %.4f auc %.3f (%.2fs)", hist.model, epoch,
                 train_loss, val_loss, val_auc, seconds)
        # an epoch only counts as an improvement if it beats the best by more than min_delta
        if val_loss < best_loss - config.min_delta:
            best_loss = val_loss
            best_state = net.state()
            hist.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
    hist.stopped_epoch = len(hist.records)
    net.load_state(best_state)
    return net, hist


@dataclass
class TimingRow:
    model: str
    mean_seconds: float
    epochs: int
    timesteps: int


def epoch_time_report(histories: dict[str, TrainHistory] | Sequence[TrainHistory]) -> list[TimingRow]:
    """Mean seconds per epoch for each model, fastest first."""
    items = histories.items() if isinstance(histories, dict) else ((h.model, h) for h in histories)
    rows = [TimingRow(name, h.mean_epoch_seconds(), len(h.records), h.timesteps) for name, h in items]
    return sorted(rows, key=lambda r: (r.mean_seconds, r.model))


def format_timing(rows: Sequence[TimingRow]) -> str:
    lines = [f"{'model':<12}{'s/epoch':>10}{'epochs':>8}{'timesteps':>11}"]
    for r in rows:
        lines.append(f"{r.model:<12}{r.mean_seconds:>10.3f}{r.epochs:>8d}{r.timesteps:>11d}")
    return "\n".join(lines)


def kind_timesteps(kind: ModelKind) -> int:
    from .netblocks import ModelSpec
    return timesteps(ModelSpec(kind))
