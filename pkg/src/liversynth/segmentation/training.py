"""Segmenter training with validation-Dice early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..checkpoint import Checkpoint
from ..checkpoint import state_dict_copy
from ..config import DiceLossConfig
from ..config import LossMix
from ..config import OptimizerSettings
from ..config import SegmentationTask
from ..config import SegmenterConfig
from ..core import LabelMap
from ..core import argmax_decode
from ..core import torch_generator
from ..dataset import PairedTensors
from ..dataset import load_pairs
from ..manifest import DatasetManifest
from ..metrics import dice_coefficient
from ..metrics import mean_foreground_dice
from ..training import EpochMeter
from ..training import build_optimizer
from ..training import ensure_finite
from ..training import epoch_batches
from .losses import CrossEntropyMode
from .losses import segmentation_loss
from .models import Segmenter
from .models import build_segmenter
from .models import load_segmenter
from .models import predict_probabilities

logger = logging.getLogger(__name__)

Evaluator = Callable[[Segmenter, int], float]


class EarlyStopping:
    """Stop once the monitored score has not improved for `patience` epochs."""

    def __init__(self, patience: int) -> None:
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.stale_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.stale_epochs = score, epoch, 0
            return True
        self.stale_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.patience


@dataclass
class SegmentationResult:
    checkpoint: Checkpoint
    history: list[dict[str, float]]
    best_epoch: int
    best_val_dice: float


def task_mode(task: SegmentationTask) -> CrossEntropyMode:
    return "binary" if task == "liver_only" else "categorical"


def task_labels(labels: torch.Tensor, task: SegmentationTask) -> torch.Tensor:
    """Collapse every non-background class into liver for the liver-only task."""
    return (labels > 0).long() if task == "liver_only" else labels


def relabel_liver_only(label: LabelMap) -> LabelMap:
    return LabelMap((label.data > 0).astype(np.uint8), num_classes=2)


def validation_dice(model: Segmenter, pairs: PairedTensors, task: SegmentationTask, batch_size: int) -> float:
    """Mean foreground Dice over the validation pairs."""
    num_classes = model.config.num_classes
    probabilities = predict_probabilities(model, pairs.volumes, batch_size).probabilities
    labels = task_labels(pairs.labels, task).numpy()
    scores = [
        mean_foreground_dice(argmax_decode(probabilities[i]), LabelMap(labels[i], num_classes), num_classes)
        for i in range(len(pairs))
    ]
    return float(np.mean(scores))


def train_segmenter(
    config: SegmenterConfig,
    manifest: DatasetManifest,
    task: SegmentationTask,
    loss_mix: LossMix,
    settings: OptimizerSettings,
    *,
    seed: int,
    patience: int = 10,
    dice: DiceLossConfig | None = None,
    train_split: str = "train",
    val_split: str = "val",
    include_degenerate: bool = False,
    evaluate: Evaluator | None = None,
) -> SegmentationResult:
    """Train on `train_split`, keeping the weights of the best validation-Dice epoch."""
    dice = dice or DiceLossConfig()
    expected = 2 if task == "liver_only" else 5
    if config.num_classes != expected:
        raise ValueError(f"task {task} needs {expected} classes, config has {config.num_classes}")
    train = load_pairs(manifest, train_split, include_degenerate=include_degenerate)
    val = None if evaluate is not None else load_pairs(manifest, val_split)
    spatial = tuple(train.volumes.shape[2:])
    targets = task_labels(train.labels, task)
    mode = task_mode(task)

    torch.manual_seed(seed)
    model = build_segmenter(config, spatial)
    optimizer = build_optimizer(model.parameters(), settings)
    generator = torch_generator(seed)
    stopper = EarlyStopping(patience)
    best_state = state_dict_copy(model)
    history: list[dict[str, float]] = []
    stage = f"seg_{config.variant}_{task}"

    for epoch in range(1, settings.epochs + 1):
        model.train()
        meter = EpochMeter()
        for batch_index, indices in enumerate(epoch_batches(len(train), settings.batch_size, generator)):
            probabilities = torch.softmax(model(train.volumes[indices]), dim=1)
            components = segmentation_loss(probabilities, targets[indices], mode, loss_mix, dice)
            ensure_finite(components, stage=stage, epoch=epoch, batch=batch_index)
            optimizer.zero_grad(set_to_none=True)
            components["loss"].backward()
            optimizer.step()
            meter.update({name: value.detach() for name, value in components.items()})
        score = evaluate(model, epoch) if evaluate is not None else validation_dice(model, val, task, settings.batch_size)
        if stopper.update(epoch, score):
            best_state = state_dict_copy(model)
        history.append({"epoch": epoch, **meter.means(), "val_dice": score})
        if epoch % settings.log_every == 0:
            logger.info("%s epoch %d val_dice=%.4f best=%.4f", stage, epoch, score, stopper.best)
        if stopper.should_stop:
            logger.info("%s stopped early at epoch %d (best epoch %d)", stage, epoch, stopper.best_epoch)
            break

    checkpoint = Checkpoint(
        kind="segmenter",
        config={
            "segmenter": config.model_dump(mode="json"),
            "task": task,
            "input_shape": list(spatial),
        },
        weights={"segmenter": best_state},
        history=history,
        constants={"seed": seed, "best_epoch": stopper.best_epoch, "best_val_dice": stopper.best},
    )
    return SegmentationResult(checkpoint, history, stopper.best_epoch, stopper.best)


def evaluate_segmenter(checkpoint: Checkpoint, manifest: DatasetManifest, split: str = "test") -> dict[str, float]:
    """Mean foreground Dice and per-class Dice of a trained segmenter on one split."""
    model = load_segmenter(checkpoint)
    task: SegmentationTask = checkpoint.config["task"]
    num_classes = model.config.num_classes
    pairs = load_pairs(manifest, split)
    probabilities = predict_probabilities(model, pairs.volumes).probabilities
    labels = task_labels(pairs.labels, task).numpy()
    per_class: dict[int, list[float]] = {class_id: [] for class_id in range(1, num_classes)}
    overall = []
    for i in range(len(pairs)):
        prediction = argmax_decode(probabilities[i])
        target = LabelMap(labels[i], num_classes)
        overall.append(mean_foreground_dice(prediction, target, num_classes))
        for class_id in per_class:
            per_class[class_id].append(dice_coefficient(prediction, target, class_id))
    scores = {"mean_dice": float(np.mean(overall))}
    scores.update({f"class_{class_id}": float(np.mean(values)) for class_id, values in per_class.items()})
    return scores
