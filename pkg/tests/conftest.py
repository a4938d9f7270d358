import numpy as np
import pytest
import torch

from crossreid.generation import ArchConfig
from crossreid.synth_data import DatasetConfig, DatasetManifest, generate_dataset
from crossreid.training import TrainConfig

torch.set_num_threads(1)


def small_arch() -> ArchConfig:
    """Fast sub-default architecture for unit tests (not the gradcheck micro one)."""
    return ArchConfig(base_channels=4, content_channels=16, n_content_res=1, n_decoder_res=2,
                      style_dim=4, style_base=4, mlp_hidden=8, disc_base=4,
                      instance_channels=16, n_instance_res=1)


def small_train_config(**overrides) -> TrainConfig:
    defaults = dict(pretrain_epochs=2, joint_epochs=2, p=3, k=2, seed=0, arch=small_arch())
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> DatasetManifest:
    """12 train / 6 test identities at 32x16, 4 images per identity per modality."""
    root = tmp_path_factory.mktemp("tiny_ds")
    config = DatasetConfig(ids_train=12, ids_test=6, per_modality=4, height=32, width=16, seed=7)
    return generate_dataset(config, root, overwrite=True)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
