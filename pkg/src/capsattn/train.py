"""Adam training loop, support-weighted metrics and confusion-matrix export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as tc
from .data import Dataset, compute_class_weights

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_acc", "val_P", "val_R", "val_F", "val_macro_F")


class TrainingError(RuntimeError):
    def __init__(self, msg: str, epoch: int, batch: int):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


class EvaluationError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[tc.Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[tc.Tensor], grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise tc.DimensionError(f"adam: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - step).astype(p.dtype)


# ------------------------------------------------------------------ metrics


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f_score: float
    macro_precision: float = float("nan")
    macro_recall: float = float("nan")
    macro_f_score: float = float("nan")

    def row(self) -> tuple[float, float, float, float]:
        return (self.accuracy, self.precision, self.recall, self.f_score)


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    """Per-class P/R/F (0 where undefined), averaged by true-class support."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(predicted > 0, tp / predicted, 0.0)
        r = np.where(support > 0, tp / support, 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    w = support / total
    present = support > 0
    return Metrics(
        accuracy=float(tp.sum() / total),
        precision=float((w * p).sum()),
        recall=float((w * r).sum()),
        f_score=float((w * f).sum()),
        macro_precision=float(p[present].mean()),
        macro_recall=float(r[present].mean()),
        macro_f_score=float(f[present].mean()),
    )


def evaluate(m: M.ModelState, ds: Dataset, split: str = "test", batch_size: int = 256) -> tuple[Metrics, np.ndarray]:
    x, y = ds.subset(split)
    if len(y) == 0:
        raise EvaluationError(f"{split} split is empty")
    pred = M.predict(m, x, batch_size)
    cm = confusion_matrix(y, pred, m.config.num_classes)
    return metrics_from_confusion(cm), cm


def row_percentages(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    return np.divide(100.0 * cm, rows, out=np.zeros_like(cm), where=rows > 0)


def export_confusion(cm: np.ndarray, path, fmt: str = "csv", class_names: Sequence[str] | None = None) -> None:
    """Write the row-normalised confusion matrix as CSV or a binary PGM (P5)."""
    pct = row_percentages(cm)
    K = len(pct)
    path = Path(path)
    if fmt == "csv":
        names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *names])
            for name, row in zip(names, pct):
                w.writerow([name, *(f"{v:.1f}" for v in row)])
    elif fmt == "pgm":
        pixels = np.rint(255 * (1 - pct / 100)).astype(np.uint8)
        path.write_bytes(f"P5\n{K} {K}\n255\n".encode("ascii") + pixels.tobytes())
    else:
        raise ValueError(f"unknown confusion format {fmt!r}")


# ----------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val: Metrics | None = None

    def csv_row(self) -> list[str]:
        if self.val is None:
            tail = [""] * 5
        else:
            v = self.val
            tail = [repr(v.accuracy), repr(v.precision), repr(v.recall), repr(v.f_score), repr(v.macro_f_score)]
        return [str(self.epoch), repr(self.train_loss), *tail]


@dataclass
class TrainResult:
    model: M.ModelState
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0


def write_log(history: Sequence[EpochLog], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for e in history:
            w.writerow(e.csv_row())


def train(m: M.ModelState, ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam on class-weighted cross-entropy.

    Early stopping watches validation weighted F-score when a validation
    split exists; the best-scoring parameters are restored at the end.
    """
    train_idx = ds.indices("train")
    if len(train_idx) == 0:
        raise ValueError("train split is empty")
    weights = compute_class_weights(ds)
    has_val = len(ds.indices("val")) > 0
    rng = np.random.default_rng(cfg.seed)
    params = m.parameters()
    state = AdamState.zeros(params)
    result = TrainResult(m)
    best_f, best_vals, stale = -np.inf, None, 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            labels = ds.labels[idx]
            tc.zero_grad(params)
            loss = M.loss(m, ds.values[idx], labels, weights[labels])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at epoch {epoch}, batch {b}", epoch, b)
            tc.backward(loss, params)
            adam_step(params, [p.grad for p in params], state, cfg)
            total += value * len(idx)
        entry = EpochLog(epoch, total / len(order))
        if has_val:
            entry.val, _ = evaluate(m, ds, "val")
        result.history.append(entry)
        log.info("epoch %d loss %.5f%s", epoch, entry.train_loss, f" val F {entry.val.f_score:.4f}" if entry.val else "")

        if has_val:
            if entry.val.f_score > best_f:
                best_f, best_vals, stale = entry.val.f_score, m.copy_values(), 0
                result.best_epoch = epoch
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
        else:
            result.best_epoch = epoch

    if best_vals is not None:
        m.load_values(best_vals)
    return result
