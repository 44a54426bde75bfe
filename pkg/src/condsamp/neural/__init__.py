from .ccgan import (ARCHITECTURES, GanModel, HvdlParams, TrainConfig, TrainingDiverged,
                    build_gan, default_hvdl, hvdl_losses, sample_ccgan, train_ccgan)
from .nets import AdamState, BatchNorm, DenseNet, Layer, StaleCacheError, adam_step, backward, forward

__all__ = [
    "ARCHITECTURES", "AdamState", "BatchNorm", "DenseNet", "GanModel", "HvdlParams", "Layer",
    "StaleCacheError", "TrainConfig", "TrainingDiverged", "adam_step", "backward", "build_gan",
    "default_hvdl", "forward", "hvdl_losses", "sample_ccgan", "train_ccgan",
]
