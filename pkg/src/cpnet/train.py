"""Mini-batch training and evaluation for the toy models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .dataset import ToyDataset
from .models import ToyModel
from .tensor import DTYPE, Tape, Tensor, backward


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    k: int = 8
    seed: int = 0
    backend: str = "brute"

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (train-mode normalization)")
        if not 1 <= self.epochs:
            raise ValueError("epochs must be positive")
        if self.backend not in ("brute", "tree"):
            raise ValueError(f"unknown backend {self.backend!r}")
        t, h, w = (4, 32, 32)
        if not 1 <= self.k <= (t - 1) * h * w:
            raise ValueError(f"k={self.k} invalid for the toy geometry")


class Adam:
    """Adam with the usual default moment coefficients."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        self.params = params
        self.lr = DTYPE(lr)
        self.beta1 = DTYPE(0.9)
        self.beta2 = DTYPE(0.999)
        self.eps = DTYPE(1e-8)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self) -> None:
        self.t += 1
        b1t = DTYPE(1.0 - float(self.beta1) ** self.t)
        b2t = DTYPE(1.0 - float(self.beta2) ** self.t)
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def evaluate(model: ToyModel, frames: np.ndarray, labels: np.ndarray, batch_size: int = 64):
    """Top-1 accuracy and mean loss over a split, eval-mode normalization."""
    if len(frames) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct = 0
    loss_sum = 0.0
    for lo in range(0, len(frames), batch_size):
        batch = frames[lo : lo + batch_size].astype(DTYPE)
        lbl = labels[lo : lo + batch_size].astype(np.int64)
        logits = model.forward(batch, mode="eval")
        loss, probs = ops.softmax_cross_entropy(logits, lbl)
        correct += int((probs.argmax(axis=1) == lbl).sum())
        loss_sum += float(loss.data) * len(lbl)
    n = len(frames)
    return correct / n, loss_sum / n


def train(model: ToyModel, dataset: ToyDataset, config: TrainConfig, log=None):
    """Optimize the model; returns the per-epoch metrics history.

    One row per (epoch, split): ``{"epoch", "split", "loss", "accuracy"}``.
    Training stops early once an epoch finishes at 100% train accuracy;
    the parameters with the best validation accuracy are restored into
    the model before returning.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.trainable(), config.lr)
    history: list[dict] = []
    best_val = -1.0
    best_arrays = model.snapshot()

    train_frames = dataset.train_frames
    train_labels = dataset.train_labels
    n_train = len(train_frames)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        correct = 0
        loss_sum = 0.0
        for lo in range(0, n_train, config.batch_size):
            sel = order[lo : lo + config.batch_size]
            if sel.size < 2:
                continue  # train-mode normalization needs a population
            batch = train_frames[sel].astype(DTYPE)
            lbl = train_labels[sel].astype(np.int64)
            tape = Tape()
            logits = model.forward(batch, mode="train", tape=tape)
            loss, probs = ops.softmax_cross_entropy(logits, lbl, tape)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}")
            model.zero_grads()
            backward(loss, tape)
            optimizer.step()
            tape.reset()
            correct += int((probs.argmax(axis=1) == lbl).sum())
            loss_sum += float(loss.data) * sel.size
        train_acc = correct / n_train
        train_loss = loss_sum / n_train
        val_acc, val_loss = evaluate(model, dataset.val_frames, dataset.val_labels)
        history.append(
            {"epoch": epoch, "split": "train", "loss": train_loss, "accuracy": train_acc}
        )
        history.append({"epoch": epoch, "split": "val", "loss": val_loss, "accuracy": val_acc})
        if log is not None:
            log(
                f"epoch {epoch:3d}  train loss {train_loss:.4f} acc {train_acc:.3f}  "
                f"val loss {val_loss:.4f} acc {val_acc:.3f}"
            )
        if val_acc > best_val:
            best_val = val_acc
            best_arrays = model.snapshot()
        if train_acc >= 1.0:
            break
    model.restore(best_arrays)
    return history


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,split,loss,accuracy"]
    for row in history:
        lines.append(f"{row['epoch']},{row['split']},{row['loss']:.6f},{row['accuracy']:.6f}")
    return "\n".join(lines) + "\n"
