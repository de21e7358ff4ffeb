"""First-order Taylor filter pruning of the device-side convolutions.

The saliency of a filter is the absolute value of the mean, over batch
items and spatial positions, of activation times loss gradient at that
filter's output feature map (after BN and ReLU).  Scores are averaged over
batches and L2-normalized within each layer, so layers of different size
compete on equal footing when filters are removed globally.
"""

from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .models import SplitModel, conv_positions
from .nn import BatchNorm2d, Conv2d, Linear, PReLU, ReLU
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class FilterSaliency:
    raw: list[np.ndarray]
    normalized: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.normalized:
            self.normalized = [normalize_layer(r) for r in self.raw]

    @property
    def n_filters(self) -> int:
        return sum(r.size for r in self.raw)


@dataclass
class PruneMask:
    keep: list[np.ndarray]

    @classmethod
    def all_keep(cls, widths: list[int]) -> "PruneMask":
        return cls([np.ones(w, dtype=bool) for w in widths])

    @property
    def n_removed(self) -> int:
        return int(sum((~k).sum() for k in self.keep))

    def to_lists(self) -> list[list[int]]:
        return [k.astype(int).tolist() for k in self.keep]

    @classmethod
    def from_lists(cls, lists) -> "PruneMask":
        return cls([np.asarray(k, dtype=bool) for k in lists])


def normalize_layer(scores: np.ndarray) -> np.ndarray:
    norm = np.sqrt((scores * scores).sum())
    return scores / norm if norm > 0 else np.zeros_like(scores)


def device_activation_positions(model: SplitModel) -> list[int]:
    """Index (in the backbone) of the activation that follows each device-side conv."""
    layers = model.prefix.layers
    out = []
    for ci in conv_positions(layers):
        j = ci + 1
        while j < len(layers) and not isinstance(layers[j], ReLU):
            j += 1
        if j == len(layers):
            raise ConfigError(f"conv at position {ci} has no following activation")
        out.append(j)
    return out


def forward_with_hook(model: SplitModel, images: Tensor, hook) -> Tensor:
    """Forward pass where ``hook(k, act)`` may observe or replace the k-th device activation."""
    positions = {p: k for k, p in enumerate(device_activation_positions(model))}
    x = images
    for i, layer in enumerate(model.prefix.layers):
        x = layer(x)
        if i in positions:
            x = hook(positions[i], x)
    if model.has_codec:
        return model.forward_server(model.transmit(model.encode_features(x)))
    return model.suffix(x)


@contextmanager
def _frozen_buffers(model: SplitModel):
    """Restore BN running statistics after a scoring pass in train mode."""
    saved = {name: buf.copy() for name, buf in model.named_buffers()}
    try:
        yield
    finally:
        for name, buf in model.named_buffers():
            buf[...] = saved[name]


def _as_tensor_batch(images) -> Tensor:
    return images if isinstance(images, Tensor) else Tensor(images)


def taylor_saliency(model: SplitModel, batches) -> FilterSaliency:
    """Vectorized Taylor scores for every device-side filter.

    ``batches`` yields (preprocessed images, labels).  Parameter gradients
    and BN running statistics are left as they were.
    """
    n_layers = len(device_activation_positions(model))
    if n_layers == 0:
        raise ConfigError("no prunable convolutions before the split point")
    totals: list[np.ndarray] | None = None
    n_batches = 0
    with _frozen_buffers(model):
        for images, labels in batches:
            acts: list[Tensor] = []

            def keep(k, a):
                acts.append(a.retain_grad())
                return a

            loss = F.cross_entropy(forward_with_hook(model, _as_tensor_batch(images), keep), labels)
            loss.backward()
            scores = [np.abs((a.data * a.grad).mean(axis=(0, 2, 3))) for a in acts]
            totals = scores if totals is None else [t + s for t, s in zip(totals, scores)]
            n_batches += 1
    model.zero_grad()
    if n_batches == 0:
        raise ValueError("taylor_saliency needs at least one batch")
    return FilterSaliency([t / n_batches for t in totals])


def naive_taylor_saliency(model: SplitModel, batches) -> FilterSaliency:
    """Loop-based reference for :func:`taylor_saliency`.

    Activation gradients are read from zero-valued probe leaves added to
    each activation, and the products are accumulated element by element.
    """
    n_layers = len(device_activation_positions(model))
    totals = [None] * n_layers
    n_batches = 0
    with _frozen_buffers(model):
        for images, labels in batches:
            probes: list[tuple[np.ndarray, Tensor]] = []

            def attach(k, a):
                probe = Tensor(np.zeros(a.shape), requires_grad=True)
                probes.append((a.data, probe))
                return a + probe

            loss = F.cross_entropy(forward_with_hook(model, _as_tensor_batch(images), attach), labels)
            loss.backward()
            for k, (a, probe) in enumerate(probes):
                n, c, h, w = a.shape
                layer_scores = np.zeros(c)
                for f in range(c):
                    acc = 0.0
                    for i in range(n):
                        for y in range(h):
                            for x in range(w):
                                acc += a[i, f, y, x] * probe.grad[i, f, y, x]
                    layer_scores[f] = abs(acc / (n * h * w))
                totals[k] = layer_scores if totals[k] is None else totals[k] + layer_scores
            n_batches += 1
    model.zero_grad()
    return FilterSaliency([t / n_batches for t in totals])


def select_filters(s: FilterSaliency, n_remove: int, min_filters: int = 1) -> PruneMask:
    """Remove the ``n_remove`` globally lowest normalized scores, keeping ``min_filters`` per layer.

    Ties go to the earlier (layer, filter) pair.
    """
    widths = [r.size for r in s.normalized]
    capacity = sum(max(w - min_filters, 0) for w in widths)
    if n_remove < 0 or n_remove > capacity:
        raise ConfigError(f"cannot remove {n_remove} filters; at most {capacity} are removable")
    mask = PruneMask.all_keep(widths)
    if n_remove == 0:
        return mask
    scores = np.concatenate(s.normalized)
    layer_idx = np.concatenate([np.full(w, k) for k, w in enumerate(widths)])
    filt_idx = np.concatenate([np.arange(w) for w in widths])
    order = np.lexsort((filt_idx, layer_idx, scores))
    left = list(widths)
    removed = 0
    for j in order:
        k = layer_idx[j]
        if left[k] <= min_filters:
            continue
        mask.keep[k][filt_idx[j]] = False
        left[k] -= 1
        removed += 1
        if removed == n_remove:
            break
    return mask


def _take(t: Tensor, keep: np.ndarray, axis: int) -> Tensor:
    return Tensor(np.compress(keep, t.data, axis=axis).copy(), requires_grad=True)


def _prune_outputs(conv: Conv2d, bn: BatchNorm2d | None, keep: np.ndarray) -> None:
    conv.weight = _take(conv.weight, keep, 0)
    conv.bias = _take(conv.bias, keep, 0)
    if bn is not None:
        bn.weight = _take(bn.weight, keep, 0)
        bn.bias = _take(bn.bias, keep, 0)
        bn.running_mean = bn.running_mean[keep].copy()
        bn.running_var = bn.running_var[keep].copy()


def _prune_inputs(layer, keep: np.ndarray, spatial: int = 1) -> None:
    if isinstance(layer, Conv2d):
        layer.weight = _take(layer.weight, keep, 1)
    elif isinstance(layer, Linear):
        cols = np.repeat(keep, spatial)
        layer.weight = _take(layer.weight, cols, 1)
    else:
        raise DimensionError(f"cannot prune the inputs of {layer!r}")


def _first_consumer(layers):
    for layer in layers:
        if isinstance(layer, (Conv2d, Linear)):
            return layer
    raise DimensionError("no layer consumes the split-point features")


def apply_prune(model: SplitModel, mask: PruneMask) -> SplitModel:
    """Return a copy of ``model`` with the masked device-side filters deleted.

    The following conv (or, for the last device conv, the encoder and the
    server's first layer) loses the matching input channels.  Surviving
    weights and BN statistics are copied unchanged.
    """
    layers = model.prefix.layers
    convs = conv_positions(layers)
    if len(mask.keep) != len(convs):
        raise DimensionError(f"mask has {len(mask.keep)} layers, model has {len(convs)} device convs")
    for k, ci in enumerate(convs):
        if mask.keep[k].shape != (layers[ci].out_channels,):
            raise DimensionError(f"mask layer {k} has {mask.keep[k].size} entries for {layers[ci].out_channels} filters")
        if not mask.keep[k].any():
            raise ConfigError(f"mask would empty device conv {k}")

    new = copy.deepcopy(model)
    layers = new.prefix.layers
    spatial = int(np.prod(new.split_feature_shape[1:]))
    for k, ci in enumerate(convs):
        keep = mask.keep[k]
        if keep.all():
            continue
        bn = layers[ci + 1] if isinstance(layers[ci + 1], BatchNorm2d) else None
        _prune_outputs(layers[ci], bn, keep)
        if k + 1 < len(convs):
            _prune_inputs(layers[convs[k + 1]], keep)
            continue
        # last device conv: the split-point features shrink
        _prune_inputs(_first_consumer(new.suffix.layers), keep, spatial)
        if new.has_codec:
            _prune_inputs(new.encoder.layers[0], keep)
            dec = new.decoder.layers
            last_conv = [i for i, layer in enumerate(dec) if isinstance(layer, Conv2d)][-1]
            dbn = dec[last_conv + 1] if isinstance(dec[last_conv + 1], BatchNorm2d) else None
            _prune_outputs(dec[last_conv], dbn, keep)
            for layer in dec[last_conv + 1 :]:
                if isinstance(layer, PReLU):
                    layer.weight = _take(layer.weight, keep, 0)
    new.meta.removed_filters += mask.n_removed
    return new


def oracle_loss_delta(model: SplitModel, layer: int, filt: int, batches, max_params: int = 2_000_000) -> float:
    """Exact mean change in loss when filter ``filt`` of device conv ``layer`` outputs zeros."""
    if model.num_parameters() > max_params:
        raise ConfigError(f"model has {model.num_parameters()} parameters; oracle limited to {max_params}")

    def zero(k, a):
        if k != layer:
            return a
        d = a.data.copy()
        d[:, filt] = 0.0
        return Tensor(d)

    deltas = []
    with _frozen_buffers(model), no_grad():
        for images, labels in batches:
            x = _as_tensor_batch(images)
            base = F.cross_entropy(forward_with_hook(model, x, lambda k, a: a), labels).item()
            cut = F.cross_entropy(forward_with_hook(model, x, zero), labels).item()
            deltas.append(cut - base)
    if not deltas:
        raise ValueError("oracle_loss_delta needs at least one batch")
    return float(np.mean(deltas))


def device_filter_count(model: SplitModel) -> int:
    return sum(model.device_conv_widths())


def iteration_granule(n_remove: int, prunable: int, min_filters_total: int) -> int:
    """Filters removed per iteration.

    The requested count is used when it is executable at all; otherwise
    (e.g. 512 on a prefix with fewer filters) it falls back to 10% of the
    prunable filters, at least one.
    """
    if n_remove <= prunable - min_filters_total:
        return n_remove
    return max(1, prunable // 10)


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    saliency_batches: int = 10
    min_filters: int = 1
    augment: bool = True


def saliency_batches(ds, n_batches: int, batch_size: int, seed: int, key: int = 0):
    """A fixed, seeded subset of ``n_batches`` preprocessed training batches."""
    from .data import normalize
    from .tensor import make_rng

    order = make_rng(seed, "saliency", key).permutation(len(ds))[: n_batches * batch_size]
    for start in range(0, order.size, batch_size):
        idx = order[start : start + batch_size]
        yield normalize(ds.images[idx], ds.channel_stats), ds.labels[idx]


def prune_iteration(
    model: SplitModel,
    train,
    split: int | None,
    n_remove: int,
    ft: FinetuneConfig,
    seed: int = 0,
    iteration: int = 0,
    on_epoch=None,
) -> SplitModel:
    """Score, remove ``n_remove`` filters, then fine-tune for ``ft.epochs`` at ``ft.lr``."""
    from .data import AugmentConfig
    from .tensor import make_rng
    from .training import SGD, SgdConfig, classification_loss, train_epoch

    if split is not None:
        model.split = split
    model.train()
    scores = taylor_saliency(model, saliency_batches(train, ft.saliency_batches, ft.batch_size, seed, iteration))
    pruned = apply_prune(model, select_filters(scores, n_remove, ft.min_filters))
    opt = SGD(pruned.named_parameters(), SgdConfig(ft.lr, ft.momentum, ft.weight_decay))
    aug = AugmentConfig() if ft.augment else None
    for epoch in range(ft.epochs):
        rng = make_rng(seed, "shuffle", 2, iteration, epoch)
        losses = train_epoch(pruned, train, opt, ft.lr, ft.batch_size, rng, classification_loss(pruned), aug)
        if on_epoch is not None:
            on_epoch(pruned, epoch, float(np.mean(losses)))
    return pruned
