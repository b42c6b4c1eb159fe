import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

from dismae.config import FactorSpec, ModelConfig, RunConfig
from dismae.data import generate_factored_dataset


@pytest.fixture(scope="session")
def tiny_model_config() -> ModelConfig:
    """The gradient-check scale: H=8, 2+1+1 blocks, 4x4 images, patch 2, K=2."""
    return ModelConfig(
        image_size=4,
        channels=3,
        patch_size=2,
        embed_dim=8,
        semantic_depth=2,
        variation_depth=1,
        decoder_depth=1,
        decoder_dim=8,
        num_heads=2,
        mask_ratio=0.5,
        num_domains=2,
        num_classes=2,
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    spec = FactorSpec(samples_per_class_per_domain=4, noise_std=0.0, seed=11)
    return generate_factored_dataset(spec, tmp_path_factory.mktemp("smallds"))


@pytest.fixture()
def small_run_config() -> RunConfig:
    cfg = RunConfig()
    cfg.train.epochs = 2
    cfg.train.per_domain_batch = 4
    cfg.train.adaptive_interval = 1
    cfg.train.adaptive_max_epoch = 100
    return cfg
