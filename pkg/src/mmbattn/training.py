"""BCE loss, AUC, Adam, and the training loop with early stopping."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, Tensor, accumulate_grad, stable_sigmoid
from .data import Batch, batches
from .errors import ConfigError, ContractError, MetricError, TrainingError
from .model import Model
from .seeding import derive_seed

EVAL_THREADS_ENV = "MMBATTN_EVAL_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4096
    max_epochs: int = 10
    patience: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 8192

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")


def _check_labels(y: np.ndarray) -> None:
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")


def bce_loss(y_hat, y) -> float:
    """Direct probability-space log loss (the metric / test-oracle form)."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    return float(-np.mean(y * np.log(y_hat) + (1.0 - y) * np.log(1.0 - y_hat)))


def _logits_bce_value(z: np.ndarray, y: np.ndarray) -> float:
    """Stable per-batch mean BCE computed from logits."""
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def bce_with_logits(g: Graph, logits: Tensor, labels) -> Tensor:
    """Mean BCE straight from logits; gradient w.r.t. each logit is (ŷ−y)/N."""
    y = np.asarray(labels, dtype=np.float64)
    _check_labels(y)
    if logits.data.shape != y.shape:
        raise ContractError(f"logits shape {logits.shape} != labels shape {y.shape}")
    if y.size == 0:
        raise ContractError("empty batch")
    z = logits.data
    n = z.size

    def backward(grad: np.ndarray) -> None:
        if logits.requires_grad:
            accumulate_grad(logits, grad * (stable_sigmoid(z) - y) / n)

    return g.record_op(np.float64(_logits_bce_value(z, y)), (logits,), backward)


def auc(scores, labels) -> float:
    """Mann–Whitney AUC via midranks; ties count one half, O(n log n)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim != 1 or s.shape != y.shape:
        raise ContractError("scores and labels must be equal-length vectors")
    _check_labels(y)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: needs at least one positive and one negative")
    order = np.argsort(s, kind="stable")
    ss = s[order]
    boundaries = np.nonzero(np.diff(ss))[0]
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries, [s.size - 1]))
    midranks = (starts + ends) / 2.0 + 1.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(midranks, ends - starts + 1)
    pos_rank_sum = float(ranks[y == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# -- Adam ----------------------------------------------------------------


def init_adam_state(registry: dict[str, Tensor]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in registry.items()}


def adam_step(registry: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: dict[str, tuple[np.ndarray, np.ndarray]],
              config: TrainConfig, t: int) -> None:
    """One bias-corrected Adam update, deterministic given its inputs."""
    if t < 1:
        raise ContractError("Adam step index t must be >= 1")
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in registry.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)


# -- evaluation ----------------------------------------------------------


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n: int
    scores: np.ndarray  # probabilities, dataset order


def eval_thread_count() -> int:
    return max(1, int(os.environ.get(EVAL_THREADS_ENV, "1")))


def _shard_logits(model: Model, data: Batch, batch_size: int) -> np.ndarray:
    out = np.empty(data.n)
    pos = 0
    for batch in batches(data, batch_size):
        z = model.forward_logits(Graph(record=False), batch)
        out[pos:pos + batch.n] = z.data
        pos += batch.n
    return out


def evaluate(model: Model, data: Batch, batch_size: int = 8192,
             threads: int = 1) -> EvalReport:
    """Score a dataset; shards are concatenated in order before ranking."""
    if data.n == 0:
        raise ContractError("cannot evaluate an empty dataset")
    if threads <= 1 or data.n <= batch_size:
        logits = _shard_logits(model, data, batch_size)
    else:
        cuts = np.linspace(0, data.n, threads + 1, dtype=int)
        shards = [data.take(slice(int(lo), int(hi)))
                  for lo, hi in zip(cuts[:-1], cuts[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            parts = list(pool.map(lambda s: _shard_logits(model, s, batch_size), shards))
        logits = np.concatenate(parts)
    logloss = _logits_bce_value(logits, data.labels)
    scores = stable_sigmoid(logits)
    return EvalReport(auc=auc(scores, data.labels), logloss=logloss,
                      n=data.n, scores=scores)


# -- training loop -------------------------------------------------------


class EarlyStopper:
    """Stop after ``patience`` epochs without a strictly better value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record an epoch value; True when it improved the best so far."""
        if value > self.best:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class MetricsReport:
    """Final test metrics plus the per-epoch history."""

    auc: float
    logloss: float
    n: int
    history: list[dict] = field(default_factory=list)


def train(model: Model, train_data: Batch, valid_data: Batch, test_data: Batch,
          config: TrainConfig, run_seed: int, emit=None,
          eval_threads: int = 1) -> MetricsReport:
    """Adam with early stopping on validation AUC; restores the best epoch.

    Emits one record per epoch ({epoch, split, auc, logloss, train_loss,
    seconds}) and a final record with split "test".  Aborts with a
    diagnostic naming the batch index if the loss goes non-finite.
    """
    shuffle_seed = derive_seed(run_seed, "shuffle")
    state = init_adam_state(model.registry)
    stopper = EarlyStopper(config.patience)
    best = model.snapshot()
    history: list[dict] = []
    step = 0
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        tick = time.perf_counter()
        losses = []
        for bi, batch in enumerate(batches(train_data, config.batch_size,
                                           shuffle_seed, epoch)):
            g = Graph()
            logits = model.forward_logits(g, batch)
            loss = bce_with_logits(g, logits, batch.labels)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            model.zero_grad()
            g.backward(loss)
            step += 1
            adam_step(model.registry,
                      {name: p.grad for name, p in model.registry.items()},
                      state, config, step)
            losses.append(float(loss.data))
        report = evaluate(model, valid_data, config.eval_batch_size, eval_threads)
        record = {"epoch": epoch, "split": "valid", "auc": report.auc,
                  "logloss": report.logloss, "train_loss": float(np.mean(losses)),
                  "seconds": round(time.perf_counter() - tick, 3)}
        history.append(record)
        if emit is not None:
            emit(record)
        if stopper.update(report.auc):
            best = model.snapshot()
        if stopper.should_stop:
            break
    model.restore(best)
    tick = time.perf_counter()
    report = evaluate(model, test_data, config.eval_batch_size, eval_threads)
    record = {"epoch": epoch, "split": "test", "auc": report.auc,
              "logloss": report.logloss,
              "seconds": round(time.perf_counter() - tick, 3)}
    history.append(record)
    if emit is not None:
        emit(record)
    return MetricsReport(auc=report.auc, logloss=report.logloss,
                         n=test_data.n, history=history)
