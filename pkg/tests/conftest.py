"""
Shared fixtures: toy search spaces, tiny supernets and synthetic data.
"""
import os

import pytest
import torch

from nasbnn.config import DatasetDescriptor, NetConfig, TrainConfig
from nasbnn.datasets import ingest_dataset
from nasbnn.searchspace import SearchSpace, StageSpec
from nasbnn.supernet import build


def pytest_collection_modifyitems(config, items):
    if os.getenv("NASBNN_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale run; set NASBNN_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_tiny_space(name: str = "tiny") -> SearchSpace:
    """Two stages, elastic everything, 8x8 inputs."""
    return SearchSpace(
        name=name,
        stem_channel_choices=(4, 8),
        stem_stride=1,
        stages=(
            StageSpec(depth_choices=(1, 2), channel_choices=(8, 16), kernel_choices=(1, 3),
                      group_choices=(1, 2), stride=1),
            StageSpec(depth_choices=(1, 2), channel_choices=(16, 32), kernel_choices=(3,),
                      group_choices=(2, 4), stride=2),
        ),
        input_resolution=8,
        num_classes=4,
    )


@pytest.fixture
def toy_space() -> SearchSpace:
    """One stage, depth 2, widths {8, 16}: exactly three ND-valid architectures."""
    return SearchSpace(
        name="toy",
        stem_channel_choices=(8,),
        stem_stride=1,
        stages=(StageSpec(depth_choices=(2,), channel_choices=(8, 16), kernel_choices=(3,),
                          group_choices=(1,), stride=1),),
        input_resolution=8,
        num_classes=4,
    )


@pytest.fixture
def singleton_space() -> SearchSpace:
    return SearchSpace(
        name="single",
        stem_channel_choices=(8,),
        stem_stride=1,
        stages=(StageSpec(depth_choices=(1,), channel_choices=(8,), kernel_choices=(3,),
                          group_choices=(2,), stride=2),),
        input_resolution=8,
        num_classes=4,
    )


@pytest.fixture
def tiny_space() -> SearchSpace:
    return make_tiny_space()


@pytest.fixture
def tiny_net(tiny_space):
    return build(tiny_space, NetConfig(), device="cpu", seed=0)


@pytest.fixture
def images():
    return torch.randn(8, 3, 8, 8, generator=torch.Generator().manual_seed(0))


def smoke_train_config(**overrides) -> TrainConfig:
    values = dict(
        epochs=1, batch_size=16, lr_init=1e-3, seed=0, calib_batches=1, eval_every=1,
        dataset=DatasetDescriptor(kind="synthetic", num_samples=64, num_classes=4, image_size=8,
                                  val_per_class=2, seed=0),
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def train_cfg() -> TrainConfig:
    return smoke_train_config()


@pytest.fixture
def tiny_data(train_cfg):
    return ingest_dataset(train_cfg.dataset)
