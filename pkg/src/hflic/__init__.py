"""Desk-scale perceptual learned image codec.

Inverted-bottleneck transforms, an uneven 5-group channel-conditional
checkerboard entropy model with real bitstreams, region-masked perceptual
training losses, and an RD/timing evaluation harness.
"""

from .bitstream import Bitstream, decode_image, decode_image_full, encode_image, encode_image_full
from .entropy import GroupPartition, default_partition, estimate_rate, partition_channels, quantize
from .errors import (
    BitstreamError,
    ConfigurationError,
    DecodeError,
    DetectionsError,
    HeaderMismatchError,
    HflicError,
    TrainingDivergenceError,
    ValidationError,
)
from .losses import LossWeights, total_loss
from .masks import DetectionSet, RegionMasks, load_detections, rasterize, select_small_faces
from .model import CodecModel, build_model, load_checkpoint, save_checkpoint
from .training import Checkpoint, CropDataset, TrainConfig, train_base, train_perceptual
from .transforms import TransformConfig, desk_config, full_scale_config

__version__ = "0.1.0"

__all__ = [
    "Bitstream",
    "BitstreamError",
    "Checkpoint",
    "CodecModel",
    "ConfigurationError",
    "CropDataset",
    "DecodeError",
    "DetectionSet",
    "DetectionsError",
    "GroupPartition",
    "HeaderMismatchError",
    "HflicError",
    "LossWeights",
    "RegionMasks",
    "TrainConfig",
    "TrainingDivergenceError",
    "TransformConfig",
    "ValidationError",
    "build_model",
    "decode_image",
    "decode_image_full",
    "default_partition",
    "desk_config",
    "encode_image",
    "encode_image_full",
    "estimate_rate",
    "full_scale_config",
    "load_checkpoint",
    "load_detections",
    "partition_channels",
    "quantize",
    "rasterize",
    "save_checkpoint",
    "select_small_faces",
    "total_loss",
    "train_base",
    "train_perceptual",
]
