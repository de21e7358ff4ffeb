"""SGD with momentum and weight decay, step learning-rate schedules, train/eval loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .channel import AwgnChannel
from .data import AugmentConfig, Dataset, augment, batch_indices, normalize
from .errors import NumericError
from .models import SplitModel
from .nn import Module
from .tensor import Tensor, make_rng, no_grad

log = logging.getLogger(__name__)


@dataclass
class SgdConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params, grads, state, cfg: SgdConfig, names=None, lr: float | None = None) -> None:
    """In-place update: g' = g + wd*w; v = momentum*v + g'; w -= lr*v.

    ``params``, ``grads`` and ``state`` are parallel lists of arrays; ``state``
    holds one velocity buffer per parameter.
    """
    lr = cfg.lr if lr is None else lr
    for i, (w, g, v) in enumerate(zip(params, grads, state)):
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {name}")
        d = g + cfg.weight_decay * w if cfg.weight_decay else g
        v *= cfg.momentum
        v += d
        w -= lr * v


class SGD:
    """Stateful wrapper around :func:`sgd_step` for a set of named parameters."""

    def __init__(self, named_params, cfg: SgdConfig):
        self.named = list(named_params)
        self.cfg = cfg
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        names = [n for n, _ in self.named]
        sgd_step(
            [p.data for _, p in self.named],
            [p.grad for _, p in self.named],
            [self.velocity[n] for n in names],
            self.cfg,
            names,
            lr,
        )

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"velocity.{k}": v.copy() for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k][...] = state[f"velocity.{k}"]


@dataclass
class StepSchedule:
    """Piecewise-constant learning rate, multiplied by ``factor`` at each milestone epoch."""

    base_lr: float
    milestones: tuple = ()
    factor: float = 0.1


def lr_at(schedule: StepSchedule, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; decays apply from the milestone epoch onwards."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    n = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr * schedule.factor**n


@dataclass
class MetricRecord:
    phase: str
    epoch: int
    lr: float
    loss: float
    accuracy: float | None = None
    flops: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _check_loss(loss: float, phase: str, epoch: int) -> None:
    if not math.isfinite(loss):
        raise NumericError(f"{phase}: non-finite loss {loss} in epoch {epoch}")


def train_epoch(
    model: Module,
    ds: Dataset,
    opt: SGD,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    step_loss: Callable[[np.ndarray, np.ndarray], Tensor],
    augment_cfg: AugmentConfig | None = None,
) -> list[float]:
    """One pass over ``ds``; returns the per-step losses.

    ``step_loss(images, labels)`` builds the scalar loss on already
    preprocessed images.  Shuffling and augmentation both draw from ``rng``.
    """
    model.train()
    losses = []
    for idx in batch_indices(len(ds), batch_size, rng=rng):
        if augment_cfg is not None:
            images = augment(ds.images[idx], augment_cfg, rng, ds.channel_stats)
        else:
            images = normalize(ds.images[idx], ds.channel_stats)
        opt.zero_grad()
        loss = step_loss(images, ds.labels[idx])
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} at step {len(losses)}")
        loss.backward()
        opt.step(lr)
        losses.append(loss.item())
    return losses


def classification_loss(model: Module) -> Callable[[np.ndarray, np.ndarray], Tensor]:
    return lambda images, labels: F.cross_entropy(model(Tensor(images)), labels)


def predict(model: Module, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Arg-max class for preprocessed ``images``; runs without recording a graph."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = model(Tensor(images[start : start + batch_size]))
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(
    model: SplitModel,
    ds: Dataset,
    snr_db: float | None = None,
    n_noise_draws: int = 1,
    seed: int = 0,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy averaged over ``n_noise_draws`` seeded channel realizations.

    ``snr_db=None`` keeps the model's own channel (if any); ``math.inf``
    evaluates noiselessly.  The model is restored to its previous mode and
    channel afterwards.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    saved_channel = getattr(model, "channel", None)
    images = normalize(ds.images, ds.channel_stats)
    model.eval()
    try:
        accs = []
        draws = n_noise_draws if getattr(model, "has_codec", False) else 1
        for draw in range(draws):
            if getattr(model, "has_codec", False):
                snr = saved_channel.snr_db if snr_db is None and saved_channel is not None else snr_db
                if snr is None:
                    model.channel = None
                else:
                    model.channel = AwgnChannel(snr, rng=make_rng(seed, "eval_channel", draw))
            accs.append(float(np.mean(predict(model, images, batch_size) == ds.labels)))
        return float(np.mean(accs))
    finally:
        if hasattr(model, "channel"):
            model.channel = saved_channel
        model.train(was_training)
