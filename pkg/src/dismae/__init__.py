"""Dual-branch masked autoencoder for unsupervised domain generalization."""

from .config import (
    ConfigError,
    DataConfig,
    DomainPalette,
    FactorSpec,
    LossConfig,
    ModelConfig,
    ProtocolConfig,
    RunConfig,
    TrainConfig,
    load_run_config,
)
from .data import MultiDomainDataset, generate_factored_dataset, load_image_folders
from .masking import MaskPlan, full_visible_plan, random_masking
from .nets import DisMAE, LatentPair, build_model
from .patches import PatchGrid, patchify, unpatchify
from .trainer import TrainedState, checkpoint_load, checkpoint_save, train_dg, train_udg

__all__ = [
    "ConfigError",
    "DataConfig",
    "DisMAE",
    "DomainPalette",
    "FactorSpec",
    "LatentPair",
    "LossConfig",
    "MaskPlan",
    "ModelConfig",
    "MultiDomainDataset",
    "PatchGrid",
    "ProtocolConfig",
    "RunConfig",
    "TrainConfig",
    "TrainedState",
    "build_model",
    "checkpoint_load",
    "checkpoint_save",
    "full_visible_plan",
    "generate_factored_dataset",
    "load_image_folders",
    "load_run_config",
    "patchify",
    "random_masking",
    "train_dg",
    "train_udg",
    "unpatchify",
]

__version__ = "0.1.0"
