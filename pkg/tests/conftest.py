import pytest
import torch

from fsrefine.backbone import BackboneConfig, ToyBackbone
from fsrefine.episodes import SynthConfig, generate_synthetic_dataset, make_splits
from fsrefine.seeding import torch_generator

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SynthConfig(n_classes=4, image_size=32, samples_per_class=6, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return generate_synthetic_dataset(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_split(tiny_dataset):
    return make_splits(tiny_dataset.classes, 2)[0]


@pytest.fixture(scope="session")
def small_backbone():
    # seeded and frozen, but not pretrained; tests that need trained
    # features build their own
    return ToyBackbone(BackboneConfig(), generator=torch_generator(17, "backbone"))
