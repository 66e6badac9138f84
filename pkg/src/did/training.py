"""Mini-batch training: SGD with momentum, plateau LR scheduling,
per-utterance gradient accumulation, per-epoch JSON logging and
checkpointing.

Utterances are variable-length, so a batch is processed one utterance at a
time on its own tape, scaling each loss by 1/batch so the accumulated
gradient equals the gradient of the batch-mean cross-entropy.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError, NumericError
from .models import save_checkpoint
from .tensor import GradTape, Tensor, backward, log_softmax, mul, scale, tsum, zero_grads


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(logits)."""
    num_classes = logits.shape[0]
    if not 0 <= label < num_classes:
        raise ContractError(f"label {label} outside [0, {num_classes})")
    onehot = np.zeros(num_classes)
    onehot[label] = 1.0
    return scale(tsum(mul(log_softmax(logits, axis=0), Tensor(onehot))), -1.0)


class SgdMomentum:
    """v <- mu*v - lr*g; theta <- theta + v, per parameter."""

    def __init__(self, learning_rate: float = 0.001, momentum: float = 0.8):
        if learning_rate <= 0:
            raise ContractError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"sgd_step: parameter {name!r} has no gradient")
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v - self.learning_rate * p.grad
            self.velocities[name] = v
            p.data += v


def sgd_step(params: dict[str, Tensor], optimizer: SgdMomentum) -> None:
    optimizer.step(params)


@dataclass
class PlateauScheduler:
    """Halve the learning rate after `patience` epochs without dev-accuracy
    improvement beyond `threshold` (absolute); never below `min_lr`."""

    factor: float = 0.5
    patience: int = 1
    threshold: float = 0.001
    min_lr: float = 1e-5
    best: float = float("-inf")
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ContractError(f"factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ContractError(f"patience must be >= 1, got {self.patience}")

    def step(self, optimizer: SgdMomentum, dev_accuracy: float) -> float:
        if dev_accuracy > self.best + self.threshold:
            self.best = dev_accuracy
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                optimizer.learning_rate = max(optimizer.learning_rate * self.factor,
                                              self.min_lr)
                self.epochs_since_improvement = 0
        return optimizer.learning_rate


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.8
    batch_size: int = 10
    epochs: int = 20
    lr_factor: float = 0.5
    patience: int = 1
    improve_threshold: float = 0.001
    min_lr: float = 1e-5


def train_epoch(model, corpus: list[tuple[np.ndarray, int]],
                optimizer: SgdMomentum, rng: np.random.Generator,
                batch_size: int = 10) -> tuple[float, float]:
    """One shuffled pass; one sgd step per batch of <= batch_size utterances.

    Returns (mean cross-entropy, training accuracy).
    """
    if not corpus:
        raise InputError("train_epoch called with an empty corpus")
    params = model.parameters()
    order = rng.permutation(len(corpus))
    total_loss, correct = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        inv = 1.0 / len(batch)
        zero_grads(params)
        for idx in batch:
            feats, label = corpus[idx]
            with GradTape():
                logits = model.forward(feats)
                loss = scale(cross_entropy(logits, label), inv)
            value = loss.item() / inv
            if not np.isfinite(value):
                ids = ", ".join(str(i) for i in batch)
                raise NumericError(
                    f"non-finite loss (lr={optimizer.learning_rate}, "
                    f"batch indices [{ids}])")
            backward(loss)
            total_loss += value
            correct += int(np.argmax(logits.data) == label)
        optimizer.step(params)
    zero_grads(params)
    return total_loss / len(corpus), correct / len(corpus)


def predict_scores(model, feats: np.ndarray) -> np.ndarray:
    """Softmax posteriors for one utterance (no tape)."""
    logits = model.forward(feats).data
    e = np.exp(logits - logits.max())
    return e / e.sum()


def corpus_accuracy(model, corpus: list[tuple[np.ndarray, int]]) -> float:
    if not corpus:
        raise InputError("accuracy over an empty corpus")
    correct = sum(int(np.argmax(model.forward(f).data) == y) for f, y in corpus)
    return correct / len(corpus)


def fit(model, kind: str, train_corpus, dev_corpus, cfg: TrainConfig,
        rng: np.random.Generator, out_dir=None, log_path=None,
        class_names=None) -> list[dict]:
    """Full training loop; returns per-epoch history.

    Writes `epoch{N}.ckpt` plus a rolling `best.ckpt` (highest dev accuracy)
    when `out_dir` is given, and one JSON object per epoch per line when
    `log_path` is given.
    """
    optimizer = SgdMomentum(cfg.learning_rate, cfg.momentum)
    scheduler = PlateauScheduler(factor=cfg.lr_factor, patience=cfg.patience,
                                 threshold=cfg.improve_threshold, min_lr=cfg.min_lr)
    history = []
    best_dev = float("-inf")
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            started = time.perf_counter()
            lr_used = optimizer.learning_rate
            train_loss, train_acc = train_epoch(model, train_corpus, optimizer,
                                                rng, cfg.batch_size)
            dev_acc = corpus_accuracy(model, dev_corpus) if dev_corpus else train_acc
            scheduler.step(optimizer, dev_acc)
            record = {"epoch": epoch, "lr": lr_used,
                      "train_loss": round(train_loss, 6),
                      "train_acc": round(train_acc, 6),
                      "dev_acc": round(dev_acc, 6),
                      "seconds": round(time.perf_counter() - started, 3)}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir is not None:
                params = model.parameters()
                save_checkpoint(os.path.join(out_dir, f"epoch{epoch}.ckpt"),
                                kind, model.cfg, params, class_names)
                if dev_acc > best_dev:
                    best_dev = dev_acc
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"),
                                    kind, model.cfg, params, class_names)
    finally:
        if log_fh:
            log_fh.close()
    return history
