import math

import numpy as np
import pytest

from conftest import tiny_config
from splitjscc.errors import ConfigError, DimensionError, StateError
from splitjscc.models import (
    INPUT_SHAPE,
    BackboneConfig,
    CodecConfig,
    bandwidth,
    build_backbone,
    build_codec,
    build_split_model,
    propagate_shape,
    split_at,
)
from splitjscc.nn import Linear
from splitjscc.tensor import Tensor, grad_check, make_rng, no_grad

VGG_SPLIT_SHAPES = {1: (64, 16, 16), 2: (128, 8, 8), 3: (256, 4, 4), 4: (512, 2, 2), 5: (512, 1, 1)}


def images(n=2, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n,) + INPUT_SHAPE))


class TestBackbone:
    def test_default_logits_shape(self):
        cfg = BackboneConfig()
        model = build_split_model(cfg, None, rng=make_rng(0, "init"))
        model.eval()
        with no_grad():
            assert model(images(1)).shape == (1, 100)

    @pytest.mark.parametrize("k", range(1, 6))
    def test_split_feature_shapes(self, k):
        prefix, _ = split_at(build_backbone(BackboneConfig()), k)
        assert propagate_shape(prefix.layers, INPUT_SHAPE) == VGG_SPLIT_SHAPES[k]

    def test_feature_sizes_fall_after_pool1(self):
        sizes = [math.prod(VGG_SPLIT_SHAPES[k]) for k in range(1, 6)]
        assert sizes == [16384, 8192, 4096, 2048, 512]

    def test_shape_oracle_matches_forward(self, toy_cfg):
        bb = build_backbone(toy_cfg, make_rng(0))
        for k in range(1, 6):
            prefix, _ = split_at(bb, k)
            with no_grad():
                out = prefix(images(1))
            assert out.shape[1:] == propagate_shape(prefix.layers, INPUT_SHAPE)

    def test_split5_suffix_is_head(self):
        _, suffix = split_at(build_backbone(BackboneConfig()), 5)
        assert sum(isinstance(layer, Linear) for layer in suffix.layers) == 3
        assert all(not hasattr(layer, "stride") for layer in suffix.layers)

    def test_invalid_split(self):
        with pytest.raises(ConfigError):
            split_at(build_backbone(BackboneConfig()), 6)

    def test_width_scale(self, toy_cfg):
        assert toy_cfg.conv_widths()[:4] == [8, 8, 16, 16]
        assert toy_cfg.hidden_dims() == [64, 64]

    @pytest.mark.parametrize("k", range(1, 6))
    def test_split_identity_bit_exact(self, toy_cfg, k):
        whole = build_split_model(toy_cfg, None, rng=make_rng(3, "init"))
        split = build_split_model(toy_cfg, k, rng=make_rng(3, "init"))
        whole.eval()
        split.eval()
        x = images(3)
        with no_grad():
            assert whole(x).data.tobytes() == split(x).data.tobytes()
            assert split.suffix(split.prefix(x)).data.tobytes() == whole(x).data.tobytes()


class TestCodec:
    @pytest.mark.parametrize("k,c_enc,expected", [(2, 128, 2048), (4, 128, 128), (5, 8, 8), (2, 32, 512), (1, 16, 1024)])
    def test_bandwidth_law(self, k, c_enc, expected):
        assert bandwidth(VGG_SPLIT_SHAPES[k], c_enc) == expected

    @pytest.mark.parametrize("k", range(1, 6))
    @pytest.mark.parametrize("c_enc", [1, 3, 8])
    def test_round_trip_and_flat_length(self, toy_cfg, k, c_enc):
        model = build_split_model(toy_cfg, k, rng=make_rng(0), c_enc=c_enc)
        f_shape = model.split_feature_shape
        enc, dec = build_codec(f_shape, CodecConfig(c_enc), make_rng(1))
        feats = Tensor(np.random.default_rng(0).normal(size=(2,) + f_shape))
        with no_grad():
            z = enc(feats)
            assert math.prod(z.shape[1:]) == bandwidth(f_shape, c_enc)
            assert dec(z).shape[1:] == f_shape
            symbols = model.forward_device(images())
        assert symbols.shape == (2, model.bandwidth)

    def test_pool5_uses_stride1_and_no_upsample(self):
        enc, dec = build_codec((512, 1, 1), CodecConfig(8))
        assert enc.layers[0].stride == 1
        assert "Upsample2x()" not in [repr(layer) for layer in dec.layers]

    def test_max_channels(self):
        with pytest.raises(ConfigError):
            CodecConfig(5000)

    def test_odd_spatial(self):
        with pytest.raises(DimensionError):
            build_codec((4, 3, 3), CodecConfig(2))

    def test_power_per_row(self, toy_cfg):
        model = build_split_model(toy_cfg, 2, rng=make_rng(0), c_enc=4)
        with no_grad():
            x = model.forward_device(images(3)).data
        np.testing.assert_allclose((x**2).mean(axis=1), 1.0, atol=1e-12)

    def test_bandwidth_mismatch(self, toy_cfg):
        model = build_split_model(toy_cfg, 2, rng=make_rng(0), c_enc=4)
        with pytest.raises(DimensionError):
            model.forward_server(Tensor(np.zeros((1, 7))))

    def test_zero_symbols_give_valid_logits(self, toy_cfg):
        model = build_split_model(toy_cfg, 2, rng=make_rng(0), c_enc=4)
        model.eval()
        with no_grad():
            logits = model.forward_server(Tensor(np.zeros((5, model.bandwidth))))
        assert logits.shape == (5, 4) and np.isfinite(logits.data).all()

    def test_noiseless_equals_device_then_server(self, toy_cfg):
        model = build_split_model(toy_cfg, 3, rng=make_rng(0), c_enc=4, snr_db=math.inf)
        model.eval()
        x = images()
        with no_grad():
            assert model(x).data.tobytes() == model.forward_server(model.forward_device(x)).data.tobytes()

    def test_same_seed_same_logits(self, toy_cfg):
        outs = []
        for _ in range(2):
            model = build_split_model(toy_cfg, 2, rng=make_rng(5), c_enc=4, snr_db=10.0, seed=9)
            with no_grad():
                outs.append(model(images()).data)
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_no_codec_bandwidth_raises(self, toy_cfg):
        with pytest.raises(StateError):
            build_split_model(toy_cfg, 2).bandwidth

    def test_attach_needs_split(self, toy_cfg):
        with pytest.raises(StateError):
            build_split_model(toy_cfg, None).attach_codec(4)


def test_end_to_end_grad_check_frozen_noise():
    cfg = BackboneConfig(num_classes=4, width_scale=1 / 16, classifier_hidden=(32, 32))
    model = build_split_model(cfg, 4, rng=make_rng(0, "init"), c_enc=2, snr_db=10.0)
    model.eval()
    x = np.random.default_rng(1).normal(size=(2,) + INPUT_SHAPE)
    labels = np.array([1, 3])
    from splitjscc import functional as F

    def loss(_):
        model.channel.reseed(0, "channel")  # identical noise on every evaluation
        return F.cross_entropy(model(Tensor(x)), labels)

    for name, p in model.named_parameters():
        if name.startswith(("encoder.0.weight", "decoder.3.weight", "backbone.0.weight")):
            assert grad_check(loss, p) < 1e-3, name
