"""Mini-batch SGD training and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from .atf import gain_bias_augment, stream
from .data import Dataset
from .errors import ConfigError, ContractError, DivergenceError
from .filters import soft_reg
from .functional import softmax_cross_entropy
from .nn import Model
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


@dataclass
class TrainHyper:
    lr: float = 0.1
    momentum: float = 0.9
    schedule: str = "cosine"  # "cosine" or "step"
    step_epochs: int = 10
    step_gamma: float = 0.1
    epochs: int = 30
    batch_size: int = 128
    weight_decay: float = 5e-4
    reg_strength: float = 0.0
    augment_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.augment_fraction <= 1.0:
            raise ConfigError("augment_fraction must be in [0, 1]")
        if self.schedule not in ("cosine", "step"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr * self.step_gamma ** (epoch // self.step_epochs)

    def as_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Heavy-ball SGD: ``v = mu*v + g + wd*w``, ``w -= lr*v``. Weight decay
    applies to tensors named ``*.weight`` only."""

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.wd = {n: (weight_decay if n.endswith(".weight") else 0.0) for n in params}
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        for n, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.wd[n]:
                g = g + self.wd[n] * p.data
            v = self.velocity[n]
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None


def batch_loss(model: Model, x: np.ndarray, y: np.ndarray, reg_strength: float = 0.0,
               train: bool = True) -> tuple[Tensor, np.ndarray]:
    logits = model.forward(Tensor(x), train=train)
    loss = softmax_cross_entropy(logits, y)
    if reg_strength:
        loss = loss + soft_reg(model.raw_kernels()) * reg_strength
    return loss, logits.data


def _check_classes(model: Model, ds: Dataset) -> None:
    if len(ds) == 0:
        raise ContractError("dataset is empty")
    if ds.labels.max() >= model.config.num_classes or ds.labels.min() < 0:
        raise ConfigError(f"labels exceed the model's {model.config.num_classes} classes")
    if ds.images.shape[1] != model.config.in_channels:
        raise ConfigError(f"images have {ds.images.shape[1]} channels, model expects "
                          f"{model.config.in_channels}")


def train(model: Model, train_set: Dataset, hyper: TrainHyper,
          val_set: Optional[Dataset] = None,
          hooks: Iterable[Callable[[Model, int, int], None]] = (),
          log_rows: Optional[list] = None) -> list[dict]:
    """Train in place; returns one log row per epoch.

    Data order and augmentation draws depend only on ``hyper.seed``, so two
    runs with the same seed see identical batches. Rows are also appended to
    ``log_rows`` as epochs finish, so a caller keeps them if training aborts.
    """
    _check_classes(model, train_set)
    params = model.named_parameters()
    opt = SGD(params, hyper.momentum, hyper.weight_decay)
    n = len(train_set)
    order_rng = np.random.default_rng([hyper.seed, 0x0D])
    rows = [] if log_rows is None else log_rows
    step = 0
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        perm = order_rng.permutation(n)
        aug_rng = stream(hyper.seed, epoch, "AUG") if hyper.augment_fraction > 0 else None
        tot_loss = 0.0
        correct = 0
        seen = 0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            if len(idx) < 2 and start > 0:
                continue
            x = train_set.images[idx]
            if aug_rng is not None:
                x = gain_bias_augment(x, hyper.augment_fraction, aug_rng)
            y = train_set.labels[idx]
            loss, logits = batch_loss(model, x, y, hyper.reg_strength, train=True)
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite loss {lv} at epoch {epoch}, step {step}")
            backward(loss)
            opt.step(lr)
            tot_loss += lv * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(idx)
            step += 1
            for h in hooks:
                h(model, epoch, step)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": tot_loss / seen,
               "train_acc": correct / seen,
               "val_acc": evaluate(model, val_set) if val_set is not None else float("nan")}
        log.info("epoch %d lr %.4g loss %.4f train_acc %.4f val_acc %.4f", row["epoch"], lr,
                 row["train_loss"], row["train_acc"], row["val_acc"])
        rows.append(row)
    return rows


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Arg-max class per image (ties go to the lowest class index)."""
    out = []
    with no_grad():
        for s in range(0, images.shape[0], batch_size):
            out.append(model.forward(Tensor(images[s:s + batch_size]), train=False).data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in evaluation mode."""
    _check_classes(model, ds)
    return float((predict(model, ds.images, batch_size) == ds.labels).mean())


def low_shot_subsample(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep ceil(fraction * n_c) random images of every class c."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds.subset(np.arange(len(ds)))
    rng = np.random.default_rng([seed, 0x10])
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            raise ContractError(f"class {c} has no images")
        k = math.ceil(fraction * idx.size)
        keep.append(rng.choice(idx, size=k, replace=False))
    return ds.subset(np.sort(np.concatenate(keep)))
