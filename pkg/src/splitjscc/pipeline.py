"""The four training phases: pretrain, prune, codec pretrain, end-to-end.

Each phase draws its randomness from streams keyed by (seed, phase, epoch),
so resuming from a checkpoint taken between phases reproduces an
uninterrupted run exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .channel import AwgnChannel
from .complexity import device_flops
from .data import AugmentConfig, Dataset, batch_indices, normalize
from .errors import ConfigError, StateError
from .models import SplitModel
from .pruning import FinetuneConfig, device_filter_count, iteration_granule, prune_iteration
from .tensor import Tensor, make_rng, no_grad
from .training import (
    SGD,
    MetricRecord,
    SgdConfig,
    StepSchedule,
    _check_loss,
    classification_loss,
    evaluate,
    lr_at,
    train_epoch,
)

log = logging.getLogger(__name__)

PHASE_KEYS = {"phase1": 1, "phase2": 2, "phase3": 3, "phase4": 4}


@dataclass
class Phase1Config:
    epochs: int = 60
    lr: float = 0.01
    milestones: tuple = (20, 40)
    factor: float = 0.1


@dataclass
class Phase2Config:
    target_ratio: float = 0.0
    n_remove: int = 512
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    saliency_batches: int = 10
    min_filters: int = 1


@dataclass
class Phase3Config:
    epochs: int = 40
    lr: float = 0.1


@dataclass
class Phase4Config:
    epochs: int = 30
    lr: float = 1e-4


@dataclass
class PipelineConfig:
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    phase3: Phase3Config = field(default_factory=Phase3Config)
    phase4: Phase4Config = field(default_factory=Phase4Config)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    snr_db: float = 20.0
    seed: int = 0
    augment: bool = True
    eval_noise_draws: int = 1

    def __post_init__(self):
        for name, sub in (("phase1", Phase1Config), ("phase2", Phase2Config), ("phase3", Phase3Config), ("phase4", Phase4Config)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, sub(**value))
        self.phase1.milestones = tuple(self.phase1.milestones)
        self.snr_db = float(self.snr_db)
        if not 0 <= self.phase2.target_ratio < 1:
            raise ConfigError(f"target pruning ratio must lie in [0, 1), got {self.phase2.target_ratio}")
        for name in ("phase1", "phase3", "phase4"):
            sub = getattr(self, name)
            if sub.epochs < 0 or sub.lr <= 0:
                raise ConfigError(f"{name}: epochs must be >= 0 and lr > 0")
        if self.phase2.finetune_epochs < 0 or self.phase2.finetune_lr <= 0 or self.phase2.n_remove < 1:
            raise ConfigError("phase2: invalid fine-tuning settings")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def sgd(self, lr: float) -> SgdConfig:
        return SgdConfig(lr, self.momentum, self.weight_decay)

    def augment_cfg(self) -> AugmentConfig | None:
        return AugmentConfig() if self.augment else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)

    @classmethod
    def toy(cls, **overrides) -> "PipelineConfig":
        """Short schedule for width-scaled models on small synthetic data."""
        cfg = dict(
            phase1=Phase1Config(epochs=8, lr=0.01, milestones=(6,)),
            phase2=Phase2Config(target_ratio=0.25, finetune_epochs=1, finetune_lr=1e-3, saliency_batches=4),
            phase3=Phase3Config(epochs=8, lr=0.1),
            phase4=Phase4Config(epochs=2, lr=1e-3),
            batch_size=64,
        )
        cfg.update(overrides)
        return cls(**cfg)


def _record(model: SplitModel, rec: MetricRecord, trace: list) -> None:
    trace.append(rec)
    model.meta.history.append(rec.to_dict())
    log.info("%s epoch %d lr %.2g loss %.4f acc %s", rec.phase, rec.epoch, rec.lr, rec.loss, rec.accuracy)


def phase1_pretrain(model: SplitModel, train: Dataset, test: Dataset | None, cfg: PipelineConfig) -> tuple[list, list]:
    """Supervised pretraining of the whole backbone with a step schedule.

    Returns (per-epoch metric records, per-step losses).
    """
    sched = StepSchedule(cfg.phase1.lr, cfg.phase1.milestones, cfg.phase1.factor)
    opt = SGD(model.named_parameters(), cfg.sgd(cfg.phase1.lr))
    trace, steps = [], []
    for epoch in range(cfg.phase1.epochs):
        lr = lr_at(sched, epoch)
        rng = make_rng(cfg.seed, "shuffle", PHASE_KEYS["phase1"], epoch)
        losses = train_epoch(model, train, opt, lr, cfg.batch_size, rng, classification_loss(model), cfg.augment_cfg())
        loss = float(np.mean(losses))
        _check_loss(loss, "phase1", epoch)
        steps += losses
        acc = evaluate(model, test) if test is not None else None
        _record(model, MetricRecord("phase1", epoch, lr, loss, acc), trace)
    model.meta.phase = "pretrained"
    return trace, steps


def phase2_prune(model: SplitModel, train: Dataset, test: Dataset | None, split: int, cfg: PipelineConfig) -> tuple[SplitModel, list]:
    """Iterative Taylor pruning of the device-side convs until the target ratio is met."""
    model.split = split
    original = device_filter_count(model)
    if model.meta.original_device_filters == 0:
        model.meta.original_device_filters = original
    target = int(round(cfg.phase2.target_ratio * model.meta.original_device_filters))
    p2 = cfg.phase2
    n_layers = len(model.device_conv_widths())
    capacity = original - p2.min_filters * n_layers
    if target - model.meta.removed_filters > capacity:
        raise ConfigError(f"pruning ratio {p2.target_ratio} needs {target} removals; only {capacity} possible")
    granule = iteration_granule(p2.n_remove, original, p2.min_filters * n_layers)
    ft = FinetuneConfig(
        epochs=p2.finetune_epochs,
        lr=p2.finetune_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
        saliency_batches=p2.saliency_batches,
        min_filters=p2.min_filters,
        augment=cfg.augment,
    )
    trace = []
    flops = device_flops(model).device_total
    iteration = 0
    while model.meta.removed_filters < target:
        n = min(granule, target - model.meta.removed_filters)
        model = prune_iteration(model, train, split, n, ft, cfg.seed, iteration)
        new_flops = device_flops(model).device_total
        if new_flops >= flops:
            raise StateError("device FLOPs did not decrease after a pruning iteration")
        flops = new_flops
        acc = evaluate(model, test) if test is not None else None
        _record(model, MetricRecord("phase2", iteration, p2.finetune_lr, math.nan, acc, flops), trace)
        iteration += 1
    model.meta.phase = "pruned"
    return model, trace


def phase3_codec_pretrain(model: SplitModel, train: Dataset, cfg: PipelineConfig) -> list:
    """Train encoder/decoder to reconstruct split-point features through the channel (L1 loss).

    The device prefix is frozen in eval mode; features are recomputed per
    batch rather than materialized, which gives the same training set.
    """
    target = int(round(cfg.phase2.target_ratio * model.meta.original_device_filters))
    if model.meta.removed_filters < target:
        raise StateError(f"phase3 needs a model pruned to {target} filters, {model.meta.removed_filters} removed")
    if not model.has_codec:
        raise StateError("attach a codec before phase3")
    model.channel = AwgnChannel(cfg.snr_db, rng=make_rng(cfg.seed, "channel", PHASE_KEYS["phase3"]))
    prefix = model.prefix
    prefix.eval()
    model.encoder.train()
    model.decoder.train()
    params = [(f"encoder.{n}", p) for n, p in model.encoder.named_parameters()]
    params += [(f"decoder.{n}", p) for n, p in model.decoder.named_parameters()]
    opt = SGD(params, cfg.sgd(cfg.phase3.lr))
    trace = []
    for epoch in range(cfg.phase3.epochs):
        rng = make_rng(cfg.seed, "shuffle", PHASE_KEYS["phase3"], epoch)
        losses = []
        for idx in batch_indices(len(train), cfg.batch_size, rng=rng):
            with no_grad():
                feats = prefix(Tensor(normalize(train.images[idx], train.channel_stats)))
            opt.zero_grad()
            loss = F.l1_loss(model.reconstruct(feats), feats)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        loss = float(np.mean(losses))
        _check_loss(loss, "phase3", epoch)
        _record(model, MetricRecord("phase3", epoch, cfg.phase3.lr, loss), trace)
    model.train()
    model.meta.codec_trained = True
    model.meta.phase = "codec"
    return trace


def codec_l1(model: SplitModel, ds: Dataset, batch_size: int = 256) -> float:
    """Mean L1 feature-reconstruction error over ``ds`` in eval mode, using the model's channel."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with no_grad():
            for idx in batch_indices(len(ds), batch_size):
                feats = model.prefix(Tensor(normalize(ds.images[idx], ds.channel_stats)))
                total += F.l1_loss(model.reconstruct(feats), feats).item() * feats.size
                count += feats.size
    finally:
        model.train(was)
    return total / count


def phase4_end_to_end(model: SplitModel, train: Dataset, test: Dataset | None, cfg: PipelineConfig) -> tuple[list, list]:
    """Joint cross-entropy training of prefix, codec and suffix with channel noise active."""
    if not model.has_codec or not model.meta.codec_trained:
        raise StateError("phase4 needs a codec pretrained in phase3")
    model.channel = AwgnChannel(cfg.snr_db, rng=make_rng(cfg.seed, "channel", PHASE_KEYS["phase4"]))
    opt = SGD(model.named_parameters(), cfg.sgd(cfg.phase4.lr))
    trace, steps = [], []
    for epoch in range(cfg.phase4.epochs):
        rng = make_rng(cfg.seed, "shuffle", PHASE_KEYS["phase4"], epoch)
        losses = train_epoch(model, train, opt, cfg.phase4.lr, cfg.batch_size, rng, classification_loss(model), cfg.augment_cfg())
        loss = float(np.mean(losses))
        _check_loss(loss, "phase4", epoch)
        steps += losses
        acc = evaluate(model, test, cfg.snr_db, cfg.eval_noise_draws, cfg.seed) if test is not None else None
        _record(model, MetricRecord("phase4", epoch, cfg.phase4.lr, loss, acc), trace)
    model.meta.phase = "e2e"
    return trace, steps
