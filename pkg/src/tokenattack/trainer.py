"""Minibatch SGD with momentum for the desk-scale model zoo."""

from dataclasses import asdict, dataclass, field
import logging
import time

import numpy as np

from .checkpoint import Checkpoint
from .errors import ContractError, NumericalError, ShapeError, TrainingError
from .models import Classifier, build_model
from .tensor import Tensor, backward, cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    lr_decay: float = 0.1
    decay_epochs: tuple = ()
    warmup_steps: int = 0
    weight_decay: float = 5e-4
    momentum: float = 0.9
    clip_norm: float = None
    seed: int = 7
    max_train: int = None  # cap on training examples (smoke runs)

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ContractError("learning rate must be > 0")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def lr_at(self, epoch, step):
        lr = self.lr * self.lr_decay ** sum(epoch >= e for e in self.decay_epochs)
        if self.warmup_steps and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr

    def to_dict(self):
        return asdict(self)


def _check_data(spec, data):
    if tuple(data.shape) != spec.input_shape:
        raise ShapeError(f"dataset images {data.shape} do not match model input {spec.input_shape}")
    if data.num_classes != spec.num_classes:
        raise ShapeError(f"dataset has {data.num_classes} classes, model {spec.num_classes}")


def evaluate_accuracy(model, data, batch_size=500):
    """Fraction of examples whose argmax logit (lowest index on ties) equals the label."""
    if isinstance(model, Checkpoint):
        model = model.model
    if len(data) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    _check_data(model.spec, data)
    pred = model.predict(data.images, batch_size)
    return float(np.mean(pred == data.labels))


def train_model(spec, data, cfg, test_data=None, model=None):
    """Train a fresh model (or continue ``model``) and return a :class:`Checkpoint`."""
    _check_data(spec, data)
    model = model or build_model(spec, cfg.seed)
    model.requires_grad_(True)
    params = model.parameters()
    names = list(model.params)
    decay = [cfg.weight_decay if p.ndim >= 2 else 0.0 for p in params]
    velocity = [np.zeros_like(p.data) for p in params]
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    n = len(data) if cfg.max_train is None else min(cfg.max_train, len(data))
    images, labels = data.images[:n], data.labels[:n]
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total, seen, correct = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = Tensor(images[idx], dtype=model.dtype)
            yb = labels[idx]
            model.zero_grad()
            try:
                # overflow surfaces as NumericalError below; skip numpy's duplicate warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = model(xb)
                    loss = cross_entropy(logits, yb)
                    backward(loss)
            except NumericalError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingError(f"loss became {lval} in epoch {epoch}", epoch)
            grads = [p.grad for p in params]
            if cfg.clip_norm:
                gnorm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
                if gnorm > cfg.clip_norm:
                    grads = [g * (cfg.clip_norm / gnorm) for g in grads]
            lr = cfg.lr_at(epoch, step)
            for p, g, v, wd in zip(params, grads, velocity, decay):
                if wd:
                    g = g + wd * p.data
                v *= cfg.momentum
                v += g
                p.data -= (lr * v).astype(p.dtype)
            total += lval * len(idx)
            seen += len(idx)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            step += 1
        record = {
            "epoch": epoch,
            "loss": total / seen,
            "train_acc": correct / seen,
            "seconds": round(time.perf_counter() - t0, 2),
        }
        if test_data is not None:
            model.requires_grad_(False)
            record["test_acc"] = evaluate_accuracy(model, test_data)
            model.requires_grad_(True)
        history.append(record)
        log.info("epoch %s", record)
    model.requires_grad_(False)
    for k in names:
        model.params[k].grad = None
    meta = {
        "dataset": cfg.dataset,
        "epochs": cfg.epochs,
        "train_config": cfg.to_dict(),
        "history": history,
    }
    if test_data is not None:
        meta["test_accuracy"] = evaluate_accuracy(model, test_data)
    return Checkpoint(model, meta)
