"""On-device FLOP accounting.

One FLOP is one multiply-accumulate.  Bias additions are folded into the
MAC count, normalization and activation layers cost 2 operations per output
element, pooling and reshaping cost nothing.  Only layers executed on the
device are counted: the (possibly pruned) backbone prefix and the encoder.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import INPUT_SHAPE, SplitModel, layer_output_shape, pool_positions
from .nn import GDN, BatchNorm2d, Conv2d, Linear, PReLU, ReLU
from .results import ResultRow

log = logging.getLogger(__name__)

ELEMENTWISE_COST = 2


def conv_macs(in_ch: int, out_ch: int, kh: int, kw: int, out_h: int, out_w: int) -> int:
    return in_ch * out_ch * kh * kw * out_h * out_w


def layer_macs(layer, in_shape: tuple, out_shape: tuple) -> int:
    if isinstance(layer, Conv2d):
        kh, kw = layer.kernel_size
        return conv_macs(layer.in_channels, layer.out_channels, kh, kw, out_shape[1], out_shape[2])
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features
    if isinstance(layer, (BatchNorm2d, GDN, PReLU, ReLU)):
        return ELEMENTWISE_COST * int(np.prod(out_shape))
    return 0


@dataclass
class FlopReport:
    layers: list[tuple[str, int]] = field(default_factory=list)
    device_total: int = 0
    cumulative_by_split: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "layers": [{"name": n, "macs": m} for n, m in self.layers],
            "device_total": self.device_total,
            "cumulative_by_split": {str(k): v for k, v in self.cumulative_by_split.items()},
        }


def _walk(layers, shape, tag: str) -> tuple[list[tuple[str, int]], tuple]:
    out = []
    for i, layer in enumerate(layers):
        nxt = layer_output_shape(layer, shape)
        out.append((f"{tag}.{i}:{layer!r}", layer_macs(layer, shape, nxt)))
        shape = nxt
    return out, shape


def backbone_cumulative(model: SplitModel) -> dict[int, int]:
    """MACs of the backbone up to and including each pooling layer (no codec)."""
    layers = model.backbone.layers
    per_layer, _ = _walk(layers, INPUT_SHAPE, "backbone")
    running = np.cumsum([m for _, m in per_layer])
    return {k + 1: int(running[p]) for k, p in enumerate(pool_positions(layers))}


def device_flops(model: SplitModel) -> FlopReport:
    """Per-layer and total MACs of the prefix plus encoder."""
    per_layer, shape = _walk(model.prefix.layers, INPUT_SHAPE, "prefix")
    if model.has_codec:
        enc, _ = _walk(model.encoder.layers, shape, "encoder")
        per_layer += enc
    return FlopReport(
        layers=per_layer,
        device_total=int(sum(m for _, m in per_layer)),
        cumulative_by_split=backbone_cumulative(model),
    )


def _get(row, name):
    return row[name] if isinstance(row, dict) else getattr(row, name)


def flops_vs_bandwidth_frontier(rows: list[ResultRow], accuracy_floor: float = 0.02) -> list[ResultRow]:
    """Pareto-minimal (device_flops, bandwidth) rows within ``accuracy_floor`` of their baseline.

    The result is sorted by FLOPs, so bandwidth is strictly decreasing along it.
    """
    ok = [r for r in rows if _get(r, "accuracy") >= _get(r, "baseline_accuracy") - accuracy_floor]
    if not ok:
        log.warning("no rows within %.3f of the baseline accuracy; frontier is empty", accuracy_floor)
        return []
    ok.sort(key=lambda r: (_get(r, "device_flops"), _get(r, "bandwidth")))
    frontier, best = [], None
    for r in ok:
        bw = _get(r, "bandwidth")
        if best is None or bw < best:
            frontier.append(r)
            best = bw
    return frontier
