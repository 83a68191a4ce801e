"""Cross-entropy objective, Adam with weight decay, and the mini-batch loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericDomainError
from .model import TemgNet
from .segmentation import SegmentDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.001
    decoupled_weight_decay: bool = False
    batch_size: int = 512
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the batch.

    ``labels`` are 1-based class ids; a 1-D ``logits`` is treated as a batch
    of one.
    """
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = logits.shape[-1]
    if labels.shape[0] != logits.shape[0]:
        raise ContractError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if labels.min() < 1 or labels.max() > n_classes:
        raise ContractError(f"labels must lie in 1..{n_classes}, got range {labels.min()}..{labels.max()}")
    picked = T.pick(T.log_softmax(logits), labels - 1)
    return T.mul(T.tsum(picked), -1.0 / labels.shape[0])


def decays(name):
    """Weight decay applies to projection matrices only."""
    return name.endswith(".weight")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, state: AdamState, cfg: TrainConfig, grads=None):
    """One Adam update in place.

    ``params`` maps names to tensors; gradients come from ``grads`` (same
    keys, arrays) or each tensor's ``.grad``. Coupled weight decay adds
    ``wd * theta`` to the gradient before the moment updates; with
    ``cfg.decoupled_weight_decay`` the parameter is shrunk directly instead.
    """
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for {k}; step aborted")
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        wd = cfg.weight_decay if decays(k) else 0.0
        if wd and not cfg.decoupled_weight_decay:
            g = g + wd * p.data
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if wd and cfg.decoupled_weight_decay:
            update = update + cfg.learning_rate * wd * p.data
        p.data = p.data - update
    return state


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: TemgNet
    best_model: TemgNet
    best_epoch: int
    trace: list


def _labels_ok(ds, n_classes):
    if len(ds) and (ds.labels.min() < 1 or ds.labels.max() > n_classes):
        raise ContractError(f"dataset labels outside 1..{n_classes}")


def train(model: TemgNet, train_ds: SegmentDataset, cfg: TrainConfig, rng=None,
          callback=None) -> TrainResult:
    """Mini-batch training on a copy of ``model``.

    Each epoch reshuffles with ``rng`` (default: seeded from ``cfg.seed``)
    and runs ``ceil(len / batch_size)`` steps, keeping the final partial
    batch. The best model is the one with the highest training accuracy
    (earliest wins ties). ``callback(record, model)`` runs after each
    epoch and may return True to stop early.
    """
    if len(train_ds) == 0:
        raise ContractError("training dataset is empty")
    if train_ds.window != model.config.window:
        raise ContractError(f"dataset window {train_ds.window} != model window {model.config.window}")
    _labels_ok(train_ds, model.config.n_classes)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    model = model.copy()
    best = model.copy()
    best_acc, best_epoch = -1.0, 0
    state = AdamState()
    trace = []
    n = len(train_ds)
    use_dropout = model.config.dropout_rate > 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            X = train_ds.windows(idx)
            y = train_ds.labels[idx]
            logits = model.forward_batch(X, rng=rng if use_dropout else None)
            loss = cross_entropy(logits, y)
            model.zero_grad()
            T.backward(loss)
            adam_step(model.params, state, cfg)
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) + 1 == y))
        rec = EpochRecord(epoch, loss_sum / n, correct / n, time.perf_counter() - t0)
        trace.append(rec)
        log.info("epoch %d loss %.5f acc %.4f (%.1fs)", epoch, rec.mean_loss, rec.train_accuracy, rec.wall_seconds)
        if rec.train_accuracy > best_acc:
            best_acc, best_epoch = rec.train_accuracy, epoch
            best = model.copy()
        if callback is not None and callback(rec, model):
            break
    model.zero_grad()
    return TrainResult(model, best, best_epoch, trace)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "train_accuracy", "wall_seconds"])
        for r in trace:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.train_accuracy), f"{r.wall_seconds:.3f}"])


def read_trace(path):
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["mean_loss"]), float(r["train_accuracy"]),
                            float(r["wall_seconds"])) for r in csv.DictReader(fh)]
