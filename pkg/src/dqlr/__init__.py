"""Quantized latent propagation for enhancing deep slices of microscopy z-stacks."""

from dqlr.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from dqlr.config import TrainConfig, load_config
from dqlr.losses import LossConfig
from dqlr.models import ModelConfig
from dqlr.quantizer import Codebook, kmeans_fit, quantize
from dqlr.trainer import Trainer, enhance_stack, infer, train
from dqlr.zstack import DatasetSplit, ZStack, load_stack, make_synthetic_dataset

__all__ = [
    "Checkpoint",
    "Codebook",
    "DatasetSplit",
    "LossConfig",
    "ModelConfig",
    "TrainConfig",
    "Trainer",
    "ZStack",
    "enhance_stack",
    "infer",
    "kmeans_fit",
    "load_checkpoint",
    "load_config",
    "load_stack",
    "make_synthetic_dataset",
    "quantize",
    "save_checkpoint",
    "train",
]
