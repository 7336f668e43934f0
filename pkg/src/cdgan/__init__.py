"""CD-GAN: multi-domain unsupervised image-to-image translation with two tied towers."""

from .losses import LossBreakdown, LossWeights
from .model import CDGAN, DomainLabel, ModelConfig, build_model, discriminate, encode, generate
from .trainer import TrainConfig, TrainState, train, train_step

__version__ = "0.1.0"

__all__ = [
    "CDGAN",
    "DomainLabel",
    "LossBreakdown",
    "LossWeights",
    "ModelConfig",
    "TrainConfig",
    "TrainState",
    "build_model",
    "discriminate",
    "encode",
    "generate",
    "train",
    "train_step",
]
