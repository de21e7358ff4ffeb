"""VGG16-BN backbone, split points and the DeepJSCC feature codec."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import AwgnChannel, power_normalize
from .errors import ConfigError, DimensionError, StateError
from .nn import (
    GDN,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Module,
    PReLU,
    ReLU,
    Sequential,
    Upsample2x,
)
from .tensor import Tensor

INPUT_SHAPE = (3, 32, 32)
VGG16_BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))


@dataclass
class BackboneConfig:
    block_widths: tuple = VGG16_BLOCKS
    classifier_hidden: tuple = (512, 512)
    num_classes: int = 100
    width_scale: float = 1.0
    min_width: int = 8

    def __post_init__(self):
        self.block_widths = tuple(tuple(int(v) for v in b) for b in self.block_widths)
        self.classifier_hidden = tuple(int(v) for v in self.classifier_hidden)
        if len(self.block_widths) != 5:
            raise ConfigError(f"backbone needs 5 blocks, got {len(self.block_widths)}")
        if not 0 < self.width_scale <= 1:
            raise ConfigError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")

    def _scale(self, w: int) -> int:
        return max(self.min_width, int(round(w * self.width_scale)))

    def conv_widths(self) -> list[int]:
        """Output channels of every conv layer, in order (13 for VGG16)."""
        return [self._scale(w) for w, n in self.block_widths for _ in range(n)]

    def hidden_dims(self) -> list[int]:
        return [self._scale(d) for d in self.classifier_hidden]

    def convs_per_block(self) -> list[int]:
        return [n for _, n in self.block_widths]

    @property
    def classifier_dims(self) -> list[int]:
        return self.hidden_dims() + [self.num_classes]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def build_backbone(cfg: BackboneConfig, rng=None, widths: list[int] | None = None) -> Sequential:
    """conv3x3+BN+ReLU stacks per block, a 2x2 max pool after each block, then the classifier.

    ``widths`` overrides the per-conv output channels (used to rebuild pruned
    models).  With ``rng=None`` all weights are zero.
    """
    widths = list(widths) if widths is not None else cfg.conv_widths()
    if len(widths) != sum(cfg.convs_per_block()):
        raise ConfigError(f"expected {sum(cfg.convs_per_block())} conv widths, got {len(widths)}")
    layers: list[Module] = []
    in_ch, k = INPUT_SHAPE[0], 0
    for n_convs in cfg.convs_per_block():
        for _ in range(n_convs):
            layers += [Conv2d(in_ch, widths[k], 3, 1, 1, rng=rng), BatchNorm2d(widths[k]), ReLU()]
            in_ch = widths[k]
            k += 1
        layers.append(MaxPool2d(2))
    spatial = INPUT_SHAPE[1] // 2**5
    dims = [in_ch * spatial * spatial] + cfg.classifier_dims
    layers.append(Flatten())
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        # small logits at init give near-uniform predictions
        layers.append(Linear(dims[i], dims[i + 1], rng=rng, std=0.01 if last else None))
        if not last:
            layers.append(ReLU())
    return Sequential(*layers)


def pool_positions(layers) -> list[int]:
    return [i for i, layer in enumerate(layers) if isinstance(layer, MaxPool2d)]


def conv_positions(layers) -> list[int]:
    return [i for i, layer in enumerate(layers) if isinstance(layer, Conv2d)]


def split_at(backbone: Sequential, pool_index: int) -> tuple[Sequential, Sequential]:
    """Split right after the ``pool_index``-th (1-based) pooling layer; the halves share layers."""
    pools = pool_positions(backbone.layers)
    if not 1 <= pool_index <= len(pools):
        raise ConfigError(f"split point must lie in [1, {len(pools)}], got {pool_index}")
    cut = pools[pool_index - 1] + 1
    return backbone[:cut], backbone[cut:]


def propagate_shape(layers, shape: tuple) -> tuple:
    """Per-example output shape of ``layers`` applied to ``shape`` (no batch dim)."""
    for layer in layers:
        shape = layer_output_shape(layer, shape)
    return shape


def layer_output_shape(layer: Module, shape: tuple) -> tuple:
    if isinstance(layer, Conv2d):
        if shape[0] != layer.in_channels:
            raise DimensionError(f"{layer!r} cannot consume shape {shape}")
        return layer.output_shape(shape)
    if isinstance(layer, MaxPool2d):
        c, h, w = shape
        return (c, h // 2, w // 2)
    if isinstance(layer, Upsample2x):
        c, h, w = shape
        return (c, 2 * h, 2 * w)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Linear):
        return (layer.out_features,)
    if isinstance(layer, Sequential):
        return propagate_shape(layer.layers, shape)
    return shape


@dataclass
class CodecConfig:
    c_enc: int
    max_channels: int = 4096

    def __post_init__(self):
        if self.c_enc < 1:
            raise ConfigError(f"c_enc must be positive, got {self.c_enc}")
        if self.c_enc > self.max_channels:
            raise ConfigError(f"c_enc={self.c_enc} exceeds the configured maximum {self.max_channels}")

    def bandwidth(self, split_shape: tuple) -> int:
        return bandwidth(split_shape, self.c_enc)


def _check_split_shape(split_shape: tuple) -> None:
    _, h, w = split_shape
    if (h, w) != (1, 1) and (h % 2 or w % 2):
        raise DimensionError(f"codec needs even spatial dims or 1x1, got {(h, w)}")


def bandwidth(split_shape: tuple, c_enc: int) -> int:
    """Channel symbols per image: (H/2)(W/2)c_enc, or c_enc when the split feature is 1x1."""
    _check_split_shape(split_shape)
    _, h, w = split_shape
    if (h, w) == (1, 1):
        return c_enc
    return (h // 2) * (w // 2) * c_enc


def build_codec(split_shape: tuple, cc: CodecConfig, rng=None) -> tuple[Sequential, Sequential]:
    """Encoder conv(s2)->GDN->PReLU and decoder conv->IGDN->PReLU->up2x->conv->BN->PReLU.

    A 1x1 split feature cannot be downsampled: the encoder conv then uses
    stride 1 and the decoder skips the upsampling.
    """
    _check_split_shape(split_shape)
    c, h, w = split_shape
    tiny = (h, w) == (1, 1)
    encoder = Sequential(Conv2d(c, cc.c_enc, 3, 1 if tiny else 2, 1, rng=rng), GDN(cc.c_enc), PReLU(cc.c_enc))
    dec = [Conv2d(cc.c_enc, cc.c_enc, 3, 1, 1, rng=rng), GDN(cc.c_enc, inverse=True), PReLU(cc.c_enc)]
    if not tiny:
        dec.append(Upsample2x())
    dec += [Conv2d(cc.c_enc, c, 3, 1, 1, rng=rng), BatchNorm2d(c), PReLU(c)]
    return encoder, Sequential(*dec)


@dataclass
class ModelMeta:
    """Pipeline bookkeeping carried with a model and its checkpoints."""

    phase: str = "init"
    original_device_filters: int = 0
    removed_filters: int = 0
    codec_trained: bool = False
    history: list = field(default_factory=list)

    @property
    def pruning_ratio(self) -> float:
        if not self.original_device_filters:
            return 0.0
        return self.removed_filters / self.original_device_filters


class SplitModel(Module):
    """Device prefix -> encoder -> channel -> decoder -> server suffix.

    The backbone is stored whole so parameter names do not depend on the
    split point; ``prefix`` and ``suffix`` are views sharing its layers.
    Without a codec (``encoder is None``) the model is the plain split
    backbone, which is bit-identical to the unsplit network.
    """

    def __init__(
        self,
        backbone: Sequential,
        cfg: BackboneConfig,
        split: int | None = None,
        channel: AwgnChannel | None = None,
    ):
        super().__init__()
        self.backbone = backbone
        self.cfg = cfg
        self.split = split
        self.encoder: Sequential | None = None
        self.decoder: Sequential | None = None
        self.c_enc: int | None = None
        self.channel = channel
        self.meta = ModelMeta()

    # -- structure ------------------------------------------------------------
    def _cut(self) -> int:
        if self.split is None:
            return 0
        pools = pool_positions(self.backbone.layers)
        if not 1 <= self.split <= len(pools):
            raise ConfigError(f"split point must lie in [1, {len(pools)}], got {self.split}")
        return pools[self.split - 1] + 1

    @property
    def prefix(self) -> Sequential:
        return self.backbone[: self._cut()]

    @property
    def suffix(self) -> Sequential:
        return self.backbone[self._cut() :]

    @property
    def split_feature_shape(self) -> tuple:
        return propagate_shape(self.prefix.layers, INPUT_SHAPE)

    @property
    def has_codec(self) -> bool:
        return self.encoder is not None

    @property
    def bandwidth(self) -> int:
        if self.c_enc is None:
            raise StateError("model has no codec")
        return bandwidth(self.split_feature_shape, self.c_enc)

    @property
    def encoded_shape(self) -> tuple:
        return propagate_shape(self.encoder.layers, self.split_feature_shape)

    def device_conv_widths(self) -> list[int]:
        return [self.backbone.layers[i].out_channels for i in conv_positions(self.prefix.layers)]

    def conv_widths(self) -> list[int]:
        return [self.backbone.layers[i].out_channels for i in conv_positions(self.backbone.layers)]

    def attach_codec(self, c_enc: int, rng=None, max_channels: int = 4096) -> None:
        if self.split is None:
            raise StateError("choose a split point before attaching a codec")
        self.encoder, self.decoder = build_codec(self.split_feature_shape, CodecConfig(c_enc, max_channels), rng)
        self.c_enc = c_enc
        self.meta.codec_trained = False

    def codec_parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    # -- forward paths ---------------------------------------------------------------
    def forward_device(self, images: Tensor) -> Tensor:
        """Prefix, encoder, flatten and per-example power normalization: (N, B) symbols."""
        if not self.has_codec:
            raise StateError("model has no codec")
        z = self.encoder(self.prefix(images))
        return power_normalize(z.reshape(z.shape[0], -1))

    def encode_features(self, features: Tensor) -> Tensor:
        z = self.encoder(features)
        return power_normalize(z.reshape(z.shape[0], -1))

    def decode_symbols(self, symbols: Tensor) -> Tensor:
        if symbols.ndim != 2 or symbols.shape[1] != self.bandwidth:
            raise DimensionError(f"expected (N, {self.bandwidth}) symbols, got {symbols.shape}")
        return self.decoder(symbols.reshape((symbols.shape[0],) + self.encoded_shape))

    def forward_server(self, symbols: Tensor) -> Tensor:
        """Decoder and server suffix on received symbols: (N, num_classes) logits."""
        return self.suffix(self.decode_symbols(symbols))

    def transmit(self, symbols: Tensor) -> Tensor:
        return self.channel.transmit(symbols) if self.channel is not None else symbols

    def reconstruct(self, features: Tensor) -> Tensor:
        """Encoder -> channel -> decoder on split-point features."""
        return self.decode_symbols(self.transmit(self.encode_features(features)))

    def end_to_end(self, images: Tensor) -> Tensor:
        if not self.has_codec:
            return self.suffix(self.prefix(images))
        return self.forward_server(self.transmit(self.forward_device(images)))

    def forward(self, images: Tensor) -> Tensor:
        return self.end_to_end(images)


def build_split_model(
    cfg: BackboneConfig,
    split: int | None,
    rng=None,
    widths: list[int] | None = None,
    c_enc: int | None = None,
    snr_db: float | None = None,
    seed: int = 0,
) -> SplitModel:
    """Assemble a model; weights are random when ``rng`` is given, zero otherwise."""
    model = SplitModel(build_backbone(cfg, rng, widths), cfg, split)
    if split is not None:
        model.meta.original_device_filters = sum(cfg.conv_widths()[: sum(cfg.convs_per_block()[:split])])
    if c_enc is not None:
        model.attach_codec(c_enc, rng)
    if snr_db is not None:
        model.channel = AwgnChannel(snr_db, seed=seed)
    return model


def uniform_widths(cfg: BackboneConfig, split: int, ratio: float) -> list[int]:
    """Conv widths with ``round(ratio * w)`` filters removed from every device-side conv."""
    widths = cfg.conv_widths()
    n_dev = sum(cfg.convs_per_block()[:split])
    return [w - int(round(ratio * w)) if i < n_dev else w for i, w in enumerate(widths)]
