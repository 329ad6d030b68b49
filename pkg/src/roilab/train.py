"""Minibatch SGD training and inference."""
from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .data import Dataset, iterate_batches
from .metrics import EvalRecord, make_records
from .models import Model, model_forward
from .optim import sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: Optional[int] = None
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: Tuple[float, int] = (0.1, 15)
    eval_every: int = 1

    def __post_init__(self):
        self.lr_decay = (float(self.lr_decay[0]), int(self.lr_decay[1]))
        self.validate()

    def validate(self) -> None:
        if self.seed is None:
            raise ValueError("TrainConfig.seed is required")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.lr_decay[1] < 1 or self.eval_every < 1:
            raise ValueError("lr_decay period and eval_every must be >= 1")

    def lr_at(self, epoch: int) -> float:
        factor, every = self.lr_decay
        return self.lr * factor ** (epoch // every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay"] = list(self.lr_decay)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_acc", "lr"])
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_acc), repr(r.lr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [
                EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["val_acc"]), float(r["lr"]))
                for r in rows
            ]
        )


@contextlib.contextmanager
def deterministic(enabled: bool = True) -> Iterator[None]:
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _check_labels(model: Model, *datasets: Dataset) -> None:
    for ds in datasets:
        if ds is not None and len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= model.num_classes):
            raise ValueError(
                f"labels span [{ds.labels.min()}, {ds.labels.max()}] but the model has {model.num_classes} classes"
            )


def predict_logits(model: Model, images, masks, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        m = masks[start:start + batch_size]
        if m.ndim == 3:
            m = m[:, None]
        logits = model_forward(model, images[start:start + batch_size], m.astype(np.float32), train=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=np.float32)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def predict(model: Model, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class predictions for every sample of ``dataset``."""
    return argmax_lowest(predict_logits(model, dataset.images, dataset.masks, batch_size))


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> List[EvalRecord]:
    preds = predict(model, dataset, batch_size)
    return make_records(dataset.ids, dataset.labels, preds, dataset.roi_areas)


def train(model: Model, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig) -> Tuple[Model, TrainHistory]:
    """Train ``model`` in place with shuffled minibatch SGD; returns it with its history."""
    cfg.validate()
    if not len(train_set):
        raise ValueError("training set is empty")
    _check_labels(model, train_set, val_set)
    history = TrainHistory()
    params = model.parameters()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total_loss = 0.0
        correct = seen = 0
        for images, masks, labels in iterate_batches(train_set, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            logits = model_forward(model, images, masks, train=True)
            loss = T.softmax_cross_entropy(logits, labels)
            T.backward(loss)
            sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
            total_loss += float(loss.data) * len(labels)
            correct += int((argmax_lowest(logits.data) == labels).sum())
            seen += len(labels)
        val_acc = math.nan
        if val_set is not None and len(val_set) and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            val_acc = float((predict(model, val_set) == val_set.labels).mean())
        rec = EpochRecord(epoch, total_loss / seen, correct / seen, val_acc, lr)
        history.records.append(rec)
        log.info("epoch %d  loss %.4f  train_acc %.4f  val_acc %.4f  lr %.4g", epoch, rec.train_loss, rec.train_acc, val_acc, lr)
    return model, history
