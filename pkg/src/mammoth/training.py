"""Training recipe: AdamW, per-step cosine decay, class-weighted sampling,
batch size 1, early stopping on a validation metric.

Defaults: lr 1e-4, weight decay 1e-5, max 20 epochs with patience 5 after
a 10-epoch minimum when a validation set exists, exactly 10 epochs when
it does not, dropout 0.25 on feedforward outputs and 0.1 on input
features (both applied inside the layers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NonFiniteError
from .metrics import auroc, balanced_accuracy


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 20
    min_epochs: int = 10
    patience: int = 5
    epochs_no_val: int = 10
    batch_size: int = 1
    seed: int = 0
    dropout_features: float = 0.1
    dropout_ff: float = 0.25
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.min_epochs > self.max_epochs:
            raise ConfigError(f"min_epochs {self.min_epochs} > max_epochs {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Decoupled weight decay followed by bias-corrected Adam."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self, lr: float, weight_decay: float = 0.0):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in tensor {name!r}")
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * update


def weighted_sampler(labels, rng) -> np.ndarray:
    """Epoch-length index stream with uniform class frequency.

    Each draw picks a class uniformly (this is what per-sample weights
    proportional to 1/count(class) amount to), then a uniform member of
    that class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = {c: np.nonzero(labels == c)[0] for c in classes}
    for c, m in members.items():
        if m.size == 0:
            raise ConfigError(f"class {c} has no samples")
    picks = rng.integers(0, len(classes), size=len(labels))
    return np.array([members[classes[c]][rng.integers(0, members[classes[c]].size)]
                     for c in picks])


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_metric: float | None
    lr: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    stopped_early: bool = False

    def rows(self):
        return [asdict(e) for e in self.epochs]


def evaluate(model, bags, num_classes: int):
    """(balanced accuracy or AUROC, predictions, scores) over a bag list."""
    preds, scores, labels = [], [], []
    for bag in bags:
        probs = model.predict_proba(bag.features)
        preds.append(int(probs.argmax()))
        scores.append(float(probs[1]) if num_classes == 2 else 0.0)
        labels.append(bag.label)
    if num_classes == 2 and len(set(labels)) == 2:
        metric = auroc(scores, labels)
    else:
        metric = balanced_accuracy(preds, labels)
    return metric, preds, scores


def train(model, bags, val_bags, config: TrainConfig, num_classes: int,
          rng_sampler=None, rng_dropout=None, metric_fn=None):
    """Optimize ``model`` on ``bags``; returns (model, TrainHistory).

    With a validation set, stops once the metric has not improved for
    ``patience`` consecutive epochs, counted only after ``min_epochs``
    (so an immediately stagnant metric stops at min_epochs + patience).
    Without one, runs exactly ``epochs_no_val`` epochs.  ``metric_fn``
    overrides validation scoring (used by tests to inject metrics).
    """
    if not bags:
        raise ConfigError("training set is empty")
    rng_sampler = rng_sampler or np.random.default_rng(config.seed)
    rng_dropout = rng_dropout or np.random.default_rng(config.seed + 1)
    labels = [b.label for b in bags]
    has_val = bool(val_bags)
    n_epochs = config.max_epochs if has_val else config.epochs_no_val
    total_steps = config.max_epochs * len(bags)
    optimizer = AdamW(model.params, betas=config.betas, eps=config.eps)
    history = TrainHistory()
    best_metric, best_epoch = -np.inf, 0
    step = 0

    for epoch in range(1, n_epochs + 1):
        losses = []
        lr = config.lr
        for idx in weighted_sampler(labels, rng_sampler):
            bag = bags[idx]
            model.zero_grad()
            loss = model.loss(bag.features, bag.label, training=True, rng=rng_dropout)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            lr = cosine_lr(step, total_steps, config.lr)
            optimizer.step(lr, config.weight_decay)
            losses.append(value)
            step += 1

        val_metric = None
        if has_val:
            if metric_fn is not None:
                val_metric = float(metric_fn(model, val_bags))
            else:
                val_metric, _, _ = evaluate(model, val_bags, num_classes)
        history.epochs.append(EpochStats(epoch, float(np.mean(losses)), val_metric, lr))

        if has_val:
            if val_metric > best_metric:
                best_metric, best_epoch = val_metric, epoch
            if epoch >= config.min_epochs and \
                    epoch - max(best_epoch, config.min_epochs) >= config.patience:
                history.stopped_early = True
                break
    return model, history


def write_history_csv(history: TrainHistory, path):
    import csv
    import os
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_metric", "lr"])
        for e in history.epochs:
            writer.writerow([e.epoch, f"{e.train_loss:.8f}",
                             "" if e.val_metric is None else f"{e.val_metric:.8f}",
                             f"{e.lr:.10f}"])
    os.replace(tmp, path)
