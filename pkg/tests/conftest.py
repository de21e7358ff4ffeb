import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splitjscc.data import channel_stats, synthetic_dataset
from splitjscc.models import BackboneConfig, build_split_model
from splitjscc.tensor import make_rng

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(num_classes: int = 4, width: int = 2, blocks: int = 1) -> BackboneConfig:
    """A 5-block backbone with ``blocks`` convs of ``width`` filters per block."""
    return BackboneConfig(
        block_widths=tuple((width, blocks) for _ in range(5)),
        classifier_hidden=(6, 6),
        num_classes=num_classes,
        min_width=1,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def toy_cfg():
    return BackboneConfig(num_classes=4, width_scale=1 / 8)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_split_model(tiny_cfg, 2, rng=make_rng(0, "init"))


@pytest.fixture(scope="session")
def small_data():
    train = synthetic_dataset(4, 16, seed=0)
    test = synthetic_dataset(4, 8, seed=0, split_tag="test")
    stats = channel_stats(train)
    return train.with_stats(stats), test.with_stats(stats)


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def micro_experiment(tmp_path, **overrides):
    """An ExperimentConfig small enough to run all four phases in about a second."""
    from splitjscc.harness import ExperimentConfig
    from splitjscc.pipeline import Phase1Config, Phase2Config, Phase3Config, Phase4Config, PipelineConfig

    pipeline = PipelineConfig(
        phase1=Phase1Config(epochs=2, lr=0.05, milestones=(1,)),
        phase2=Phase2Config(n_remove=1, finetune_epochs=1, finetune_lr=1e-3, saliency_batches=1),
        phase3=Phase3Config(epochs=1, lr=0.05),
        phase4=Phase4Config(epochs=1, lr=1e-3),
        batch_size=16,
        augment=False,
    )
    cfg = dict(
        dataset={"kind": "synthetic", "class_count": 4, "n_train_per_class": 8, "n_test_per_class": 4, "seed": 0},
        backbone=tiny_config(width=2),
        split=2,
        pruning_ratio=0.25,
        c_enc=2,
        snr_db_list=[20.0, 0.0],
        pipeline=pipeline,
        seed=0,
        output_dir=str(tmp_path / "runs"),
    )
    cfg.update(overrides)
    return ExperimentConfig(**cfg)


def micro_config_dict(tmp_path, **overrides) -> dict:
    return micro_experiment(tmp_path, **overrides).to_dict()
