"""SGD-with-momentum training of full-precision and binary models."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset, EmptyDatasetError
from .layers import softmax_cross_entropy
from .model import Model
from .tensor import make_rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.9
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("need lr > 0 and 0 < lr_decay <= 1")


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float) -> None:
    """In place: v <- momentum * v - lr * g; p <- p + v."""
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v -= lr * g
        p += v


def evaluate(model: Model, ds: Dataset, batch_size: int = 256, topk: int = 5) -> dict:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, ds.images, batch_size)
    loss, _ = softmax_cross_entropy(logits, ds.labels)
    return accuracy_report(logits, ds.labels, topk) | {"loss": loss}


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model.forward(images[i:i + batch_size], training=False) for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def accuracy_report(logits: np.ndarray, labels: np.ndarray, topk: int = 5) -> dict:
    pred = logits.argmax(axis=1)
    report = {"top1": float((pred == labels).mean()), "n": int(len(labels))}
    if logits.shape[1] >= topk:
        top = np.argsort(-logits, axis=1, kind="stable")[:, :topk]
        report[f"top{topk}"] = float((top == labels[:, None]).any(axis=1).mean())
    return report


def train_epochs(model: Model, train: Dataset, val: Dataset | None, cfg: TrainConfig, on_epoch=None) -> list[dict]:
    """Run ``cfg.epochs`` epochs of minibatch SGD; returns one log row per epoch.

    The learning rate is multiplied by ``cfg.lr_decay`` after every epoch;
    each row records the rate used during that epoch.
    """
    if len(train) == 0:
        raise EmptyDatasetError("training set is empty")
    rng = make_rng(cfg.seed)
    keys = [k for k, _ in model.parameters()]
    velocity = {k: np.zeros_like(p) for k, p in model.parameters()}
    lr = cfg.lr
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total_loss = 0.0
        correct = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            # overflow is reported by the finite checks below, not as warnings
            with np.errstate(over="ignore", invalid="ignore"):
                logits = model.forward(x, training=True)
                loss, g = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} in epoch {epoch}")
                model.backward(g)
            params = dict(model.parameters())
            grads = model.gradients()
            sgd_momentum_step([params[k] for k in keys], [grads[k] for k in keys],
                              [velocity[k] for k in keys], lr, cfg.momentum)
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / len(train),
            "train_acc": correct / len(train),
            "val_acc": evaluate(model, val)["top1"] if val is not None and len(val) else float("nan"),
        }
        rows.append(row)
        log.info("epoch %d lr=%.5g loss=%.4f train_acc=%.4f val_acc=%.4f",
                 epoch, lr, row["train_loss"], row["train_acc"], row["val_acc"])
        if on_epoch is not None:
            on_epoch(row)
        lr *= cfg.lr_decay
    return rows


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], repr(float(r["lr"])), f"{r['train_loss']:.6f}",
                    f"{r['train_acc']:.6f}", f"{r['val_acc']:.6f}"])
    return buf.getvalue()
