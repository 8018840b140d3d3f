"""Optimization, evaluation metrics and the finite-difference gradient checker."""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import model
from .model import ModelConfig, ModelParams
from .numerics import DomainError, SeededRng, ShapeError

log = logging.getLogger(__name__)

L2_GRID = (5e-3, 5e-4, 5e-5, 5e-6)
MAX_GRADCHECK_PARAMS = 10_000
_DROPOUT_STREAM = 0x5DEECE66D


class AdamState:
    """Bias-corrected Adam moments keyed like the parameter dict."""

    def __init__(self, learning_rate: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place."""
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient keys {sorted(grads)} do not mirror parameters {sorted(params)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != parameter shape {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def auc(scores, labels) -> float:
    """ROC AUC via the rank-sum statistic; tied scores share their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} differ")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC is undefined unless both classes are present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    return model.bce(scores, labels)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 20
    patience: Optional[int] = 3
    seed: int = 0
    learning_rate: float = 0.001

    def __post_init__(self):
        if self.batch_size < 1:
            raise model.ConfigError("batch_size", f"must be at least 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise model.ConfigError("max_epochs", f"must be non-negative, got {self.max_epochs}")
        if self.patience is not None and self.patience < 1:
            raise model.ConfigError("patience", f"must be at least 1 (or null for no early stop), got {self.patience}")
        if self.learning_rate < 0:
            raise model.ConfigError("learning_rate", f"must be non-negative, got {self.learning_rate}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    val_logloss: float


@dataclass
class MetricsReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    test_auc: float = float("nan")
    test_logloss: float = float("nan")
    seconds: float = 0.0

    @property
    def best_val_auc(self) -> float:
        return max((e.val_auc for e in self.epochs), default=float("nan"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_auc,val_logloss\n")
        for e in self.epochs:
            buf.write(f"{e.epoch},{e.train_loss!r},{e.val_auc!r},{e.val_logloss!r}\n")
        buf.write(f"test,,{self.test_auc!r},{self.test_logloss!r}\n")
        return buf.getvalue()


def _arrays(split):
    if isinstance(split, tuple):
        x, y = split
        return np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.float64)
    return split.arrays()


def evaluate(params: ModelParams, config: ModelConfig, x, y) -> tuple[float, float]:
    scores = model.predict(x, params, config)
    return auc(scores, y), logloss(scores, y)


def train(train_split, val_split, test_split, model_config: ModelConfig, train_config: TrainConfig,
          params: Optional[ModelParams] = None):
    """Mini-batch Adam with early stopping on validation AUC.

    Splits are :class:`~destine.features.Dataset` objects or ``(x, y)``
    tuples.  Returns ``(best_params, MetricsReport)``; the test metrics are
    computed with the best parameters.
    """
    start = time.perf_counter()
    x_tr, y_tr = _arrays(train_split)
    x_va, y_va = _arrays(val_split)
    x_te, y_te = _arrays(test_split)
    if len(x_tr) == 0:
        raise DomainError("training split is empty")
    if model_config.use_dnn and train_config.batch_size < 2:
        raise model.ConfigError("batch_size", "must be at least 2 when the DNN branch is enabled")
    seed = train_config.seed
    if params is None:
        params = model.init_params(model_config, SeededRng(seed))
    dropout_rng = SeededRng(seed ^ _DROPOUT_STREAM)
    state = AdamState(train_config.learning_rate)
    report = MetricsReport()
    best = params.copy()
    best_auc = -math.inf
    stale = 0
    bs = train_config.batch_size
    for epoch in range(1, train_config.max_epochs + 1):
        order = SeededRng(seed + epoch).permutation(len(x_tr))
        total, seen = 0.0, 0
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            if model_config.use_dnn and len(idx) < 2:
                continue  # a trailing singleton batch cannot be batch-normalized
            xb, yb = x_tr[idx], y_tr[idx]
            y_hat, cache = model.forward(xb, params, model_config, "train", dropout_rng)
            total += model.loss(y_hat, yb, params, model_config.l2_weight) * len(idx)
            seen += len(idx)
            grads = model.backward(cache, yb, params, model_config)
            adam_step(params.tensors, grads, state)
            model.update_running_stats(params, cache)
        val_auc, val_ll = evaluate(params, model_config, x_va, y_va)
        report.epochs.append(EpochRecord(epoch, total / max(seen, 1), val_auc, val_ll))
        log.info("epoch %d train_loss=%.6f val_auc=%.6f val_logloss=%.6f",
                 epoch, total / max(seen, 1), val_auc, val_ll)
        if val_auc > best_auc:
            best_auc, best, stale = val_auc, params.copy(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if train_config.patience is not None and stale >= train_config.patience:
                break
    report.test_auc, report.test_logloss = evaluate(best, model_config, x_te, y_te)
    report.seconds = time.perf_counter() - start
    return best, report


def l2_sweep(train_split, val_split, test_split, model_config: ModelConfig, train_config: TrainConfig,
             grid=L2_GRID) -> dict[float, MetricsReport]:
    """Train once per L2 weight; selection is left to the caller."""
    return {w: train(train_split, val_split, test_split, replace(model_config, l2_weight=w), train_config)[1]
            for w in grid}


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    tol: float

    @property
    def passed(self) -> bool:
        return all(err <= self.tol for err in self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [f"{name} checked={self.checked[name]} max_rel_err={err:.3e} {'ok' if err <= self.tol else 'FAIL'}"
                for name, err in self.max_rel_error.items()]


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(config: ModelConfig, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
               batch_size: int = 4, max_entries: int = 200) -> GradCheckReport:
    """Compare :func:`destine.model.backward` with central differences.

    Builds a random instance from ``config`` with unit-scale embeddings so
    that gradients are well above finite-difference noise.  Dropout is off
    and batch norm runs in train mode on a fixed batch.  Tensors larger than
    ``max_entries`` are checked on a seeded subsample of that many entries.
    """
    if model.param_count(config)["total"] > MAX_GRADCHECK_PARAMS:
        raise DomainError(f"config has {model.param_count(config)['total']} parameters; "
                          f"gradcheck is meant for tiny configs (<= {MAX_GRADCHECK_PARAMS}), shrink the dims")
    if config.use_dnn and batch_size < 2:
        raise DomainError("gradcheck with the DNN branch needs batch_size >= 2")
    config = replace(config, dropout_rate=0.0)
    rng = SeededRng(seed)
    params = model.init_params(config, rng)
    params.tensors["embedding"] = rng.normal(params.tensors["embedding"].size).reshape(
        params.tensors["embedding"].shape)
    x = rng.integers(batch_size * config.num_fields, config.total_features).reshape(batch_size, config.num_fields)
    y = (rng.uniform(batch_size) < 0.5).astype(np.float64)
    y[0], y[-1] = 1.0, 0.0

    # data term and penalty are differenced separately: an unused weight's only
    # gradient is the tiny L2 term, which cancellation in their sum would bury
    def objective():
        y_hat, _ = model.forward(x, params, config, "train")
        return np.array([model.loss(y_hat, y), config.l2_weight * model.l2_penalty(params)])

    _, cache = model.forward(x, params, config, "train")
    analytic = model.backward(cache, y, params, config)
    errors, counts = {}, {}
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        if flat.size > max_entries:
            picks = np.sort(rng.permutation(flat.size)[:max_entries])
        else:
            picks = np.arange(flat.size)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = objective()
            flat[i] = orig - h
            f_minus = objective()
            flat[i] = orig
            numeric = float(np.sum((f_plus - f_minus) / (2.0 * h)))
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        errors[name] = worst
        counts[name] = len(picks)
    return GradCheckReport(errors, counts, tol)
