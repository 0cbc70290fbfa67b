"""Existence-aware multi-organ 3D segmentation.

A multi-task U-Net whose decoder is conditioned on organ-existence
flags through channel-wise affine fusion modules, trained with mixed
supervision (voxel labels plus image-level existence labels) to
suppress segmentations of surgically removed organs.
"""

from .data import (
    CLASS_NAMES,
    ExistenceVector,
    LabelMap,
    Manifest,
    SampleRecord,
    Volume,
    load_manifest,
    load_volume,
    one_hot,
    save_manifest,
    save_volume,
)
from .losses import DiceConfig, LossWeights, combined_loss, dice_loss, seg_loss
from .network import (
    HalosNet,
    ModelOutput,
    NetworkConfig,
    build_baseline,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DiceConfig",
    "ExistenceVector",
    "HalosNet",
    "LabelMap",
    "LossWeights",
    "Manifest",
    "ModelOutput",
    "NetworkConfig",
    "PhantomConfig",
    "SampleRecord",
    "TrainConfig",
    "Volume",
    "build_baseline",
    "build_model",
    "combined_loss",
    "dice_loss",
    "generate_dataset",
    "generate_phantom",
    "load_checkpoint",
    "load_manifest",
    "load_volume",
    "one_hot",
    "save_checkpoint",
    "save_manifest",
    "save_volume",
    "seg_loss",
    "train",
]
