"""Downstream 3D segmentation: model zoo, losses and training."""

from .losses import cross_entropy_loss
from .losses import dice_loss
from .models import build_segmenter
from .models import predict_mask
from .training import EarlyStopping
from .training import evaluate_segmenter
from .training import train_segmenter

__all__ = [
    "EarlyStopping",
    "build_segmenter",
    "cross_entropy_loss",
    "dice_loss",
    "evaluate_segmenter",
    "predict_mask",
    "train_segmenter",
]
