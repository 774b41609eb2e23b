"""
Class-weighted BCE objective, optimizers, the training loop and the metric suite.

The positive class is "stable" (y = 1). A false positive is therefore an
unstable case predicted stable, the expensive mistake.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, DivergenceError, FingerprintMismatchError, ShapeError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    l2: float = 5e-4
    alpha0: float = 1.0
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    optimizer: str = "adam"
    class_weighting: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch size must be at least 1, got {self.batch_size}")
        if self.l2 < 0:
            raise ContractError(f"L2 weight must be non-negative, got {self.l2}")
        if self.epochs < 0 or self.patience < 1:
            raise ContractError(f"need epochs >= 0 and patience >= 1, got {self.epochs}, {self.patience}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {', '.join(OPTIMIZERS)}, got '{self.optimizer}'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int
    auc: float | None = None
    threshold: float = 0.5

    @staticmethod
    def _ratio(num, den):
        return num / den if den else 0.0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def acc(self):
        return self._ratio(self.tp + self.tn, self.total)

    @property
    def fpr(self):
        return self._ratio(self.fp, self.fp + self.tn)

    @property
    def fnr(self):
        return self._ratio(self.fn, self.fn + self.tp)

    @property
    def tpr(self):
        return self._ratio(self.tp, self.tp + self.fn)

    def to_dict(self):
        return {
            "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
            "acc": self.acc, "fpr": self.fpr, "fnr": self.fnr,
            "auc": self.auc, "threshold": self.threshold,
        }

    def summary(self):
        auc = "undefined" if self.auc is None else f"{self.auc:.4f}"
        return (f"ACC={self.acc:.4f} FPR={self.fpr:.4f} FNR={self.fnr:.4f} AUC={auc} "
                f"(TP={self.tp} TN={self.tn} FP={self.fp} FN={self.fn})")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def alpha1_for_batch(labels):
    """Weight of the stable class: batch_size / sum(y) - 1, or 0 for a batch without stable samples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("alpha1 needs a nonempty batch")
    positives = float(labels.sum())
    return 0.0 if positives == 0 else labels.size / positives - 1.0


def bce_term(p, y, alpha0, alpha1):
    y = np.asarray(y, dtype=np.float64)
    p = T.as_tensor(p)
    if p.shape != y.shape:
        raise ShapeError(f"bce: predictions {p.shape} and labels {y.shape} differ")
    pc = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    stable = T.total(T.mul(T.log(pc), alpha1 * y))
    unstable = T.total(T.mul(T.log(T.sub(1.0, pc)), alpha0 * (1.0 - y)))
    return T.mul(T.add(stable, unstable), -1.0)


def l2_term(parameters, beta):
    reg = T.Tensor(0.0)
    for w in parameters:
        reg = T.add(reg, T.square_sum(w))
    return T.mul(reg, 0.5 * beta)


def weighted_bce_loss(p, y, alpha0, alpha1, beta, parameters):
    """
    -sum(alpha1 y log p + alpha0 (1 - y) log(1 - p)) + beta * sum(0.5 * ||w||^2),
    with p clamped to [1e-7, 1 - 1e-7].
    """
    return T.add(bce_term(p, y, alpha0, alpha1), l2_term(parameters, beta))


def _bce_numpy(p, y, alpha0, alpha1):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.sum(alpha1 * y * np.log(pc) + alpha0 * (1.0 - y) * np.log(1.0 - pc)))


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ContractError(f"unknown optimizer '{name}'")


def _check_dataset(model, dataset, role):
    if dataset.fingerprint != model.fingerprint:
        raise FingerprintMismatchError(f"{role} set was generated on a different grid than the model")
    cfg = model.config
    if (dataset.n_nodes, dataset.window) != (cfg.n_nodes, cfg.window):
        raise ShapeError(f"{role} set has N={dataset.n_nodes}, T={dataset.window}; "
                         f"model expects N={cfg.n_nodes}, T={cfg.window}")


def _snapshot(model):
    return model.state_dict()


def _restore(model, state):
    for name, t in model.params.items():
        t.data[...] = state[name]
    for i, bn in model.bn.items():
        bn.running_mean = state[f"gc.{i}.bn.running_mean"].copy()
        bn.running_var = state[f"gc.{i}.bn.running_var"].copy()


def _split_loss_acc(model, dataset, config):
    x, y = dataset.arrays()
    if len(y) == 0:
        return float("nan"), float("nan")
    y = y.astype(np.float64)
    probs = model.predict_proba(x)
    alpha1 = alpha1_for_batch(y) if config.class_weighting else 1.0
    loss = _bce_numpy(probs, y, config.alpha0, alpha1) / len(y)
    acc = float(np.mean((probs > 0.5) == (y == 1)))
    return loss, acc


def train(model, train_set, val_set, config, on_epoch=None):
    """
    Mini-batch training with per-epoch shuffling under ``config.seed``. Keeps the
    parameters of the epoch with the best validation accuracy and stops after
    ``patience`` epochs without improvement.
    """
    _check_dataset(model, train_set, "training")
    if val_set is not None:
        _check_dataset(model, val_set, "validation")
    x, y = train_set.arrays()
    y = y.astype(np.float64)
    if len(y) == 0:
        raise ContractError("training set is empty")

    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.lr)
    result = TrainResult(model)
    best_acc, best_state, waited = -1.0, None, 0

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(y))
        seen, correct, data_loss = 0, 0, 0.0
        for batch_index, start in enumerate(range(0, len(y), config.batch_size)):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            model.zero_grad()
            p = model.forward(x[idx])
            alpha1 = alpha1_for_batch(y[idx]) if config.class_weighting else 1.0
            bce = bce_term(p, y[idx], config.alpha0, alpha1)
            loss = T.add(bce, l2_term(model.regularized(), config.l2))
            if not np.isfinite(loss.item()):
                raise DivergenceError(epoch, batch_index)
            loss.backward()
            optimizer.step()
            seen += len(idx)
            correct += int(np.sum((p.data > 0.5) == (y[idx] == 1)))
            data_loss += bce.item()

        train_loss = data_loss / seen if seen else float("nan")
        train_acc = correct / seen if seen else float("nan")
        model.eval()
        if val_set is not None and len(val_set):
            val_loss, val_acc = _split_loss_acc(model, val_set, config)
        else:
            val_loss, val_acc = train_loss, train_acc
        record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc)
        result.history.append(record)
        logger.info("epoch %d: train loss %.5f acc %.4f | val loss %.5f acc %.4f",
                    epoch, train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(record)

        if val_acc > best_acc:
            best_acc, best_state, waited = val_acc, _snapshot(model), 0
            result.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                logger.info("Early stop at epoch %d (best val acc %.4f at epoch %d)", epoch, best_acc, result.best_epoch)
                result.stopped_early = True
                break

    if best_state is not None:
        _restore(model, best_state)
    model.eval()
    return result


def roc_auc(scores, labels):
    """
    Area under the ROC curve by trapezoids over every distinct score. Tied
    scores count as half-ordered. None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = cut + 1 - tps
    tpr = np.r_[0.0, tps / positives]
    fpr = np.r_[0.0, fps / negatives]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def compute_metrics(probs, labels, threshold=0.5):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if probs.size == 0:
        raise ContractError("cannot compute metrics on an empty dataset")
    if probs.shape != labels.shape:
        raise ShapeError(f"predictions {probs.shape} and labels {labels.shape} differ")
    predicted = probs > threshold
    return Metrics(
        tp=int(np.sum(predicted & labels)),
        tn=int(np.sum(~predicted & ~labels)),
        fp=int(np.sum(predicted & ~labels)),
        fn=int(np.sum(~predicted & labels)),
        auc=roc_auc(probs, labels),
        threshold=threshold,
    )


def evaluate(model, dataset, threshold=0.5):
    _check_dataset(model, dataset, "evaluation")
    x, y = dataset.arrays()
    if len(y) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    return compute_metrics(model.predict_proba(x), y, threshold)


def write_history_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for r in history:
            writer.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.train_acc:.10g}",
                             f"{r.val_loss:.10g}", f"{r.val_acc:.10g}"])


def write_metrics_json(metrics, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report = metrics.to_dict()
    if extra:
        report.update(extra)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
