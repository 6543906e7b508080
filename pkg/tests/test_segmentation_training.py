import numpy as np
import pytest
import torch

from liversynth.checkpoint import state_dict_copy
from liversynth.config import LossMix
from liversynth.config import OptimizerSettings
from liversynth.config import SegmenterConfig
from liversynth.core import LabelMap
from liversynth.segmentation.models import load_segmenter
from liversynth.segmentation.training import EarlyStopping
from liversynth.segmentation.training import evaluate_segmenter
from liversynth.segmentation.training import relabel_liver_only
from liversynth.segmentation.training import task_labels
from liversynth.segmentation.training import train_segmenter

TINY = SegmenterConfig(num_classes=2, num_levels=2, unet_width=4)


def _settings(epochs: int, learning_rate: float = 1e-3) -> OptimizerSettings:
    return OptimizerSettings(learning_rate=learning_rate, epochs=epochs, batch_size=2, log_every=1)


def test_early_stopping_counts_stale_epochs():
    stopper = EarlyStopping(patience=2)
    assert stopper.update(1, 0.3)
    assert not stopper.update(2, 0.3)
    assert not stopper.should_stop
    assert not stopper.update(3, 0.1)
    assert stopper.should_stop
    assert stopper.best_epoch == 1


def test_liver_only_collapses_structures():
    labels = torch.tensor([0, 1, 2, 3, 4])
    assert task_labels(labels, "liver_only").tolist() == [0, 1, 1, 1, 1]
    assert task_labels(labels, "multi_class").tolist() == [0, 1, 2, 3, 4]
    relabeled = relabel_liver_only(LabelMap(np.arange(5, dtype=np.uint8).reshape(5, 1, 1)))
    assert relabeled.num_classes == 2
    assert relabeled.data.ravel().tolist() == [0, 1, 1, 1, 1]


def test_task_and_class_count_must_agree(phantom_manifest):
    with pytest.raises(ValueError, match="needs 5 classes"):
        train_segmenter(TINY, phantom_manifest, "multi_class", LossMix(), _settings(1), seed=0)


def test_keeps_best_epoch_weights_and_stops_early(phantom_manifest):
    scores = iter([0.1, 0.5, 0.4, 0.3, 0.2, 0.9])
    snapshots = {}

    def evaluate(model, epoch):
        snapshots[epoch] = state_dict_copy(model)
        return next(scores)

    result = train_segmenter(
        TINY, phantom_manifest, "liver_only", LossMix(), _settings(6), seed=0, patience=2, evaluate=evaluate
    )
    assert [row["epoch"] for row in result.history] == [1, 2, 3, 4]
    assert result.best_epoch == 2
    assert result.best_val_dice == 0.5
    assert set(result.history[0]) == {"epoch", "loss", "dice", "ce", "val_dice"}
    weights = result.checkpoint.weights["segmenter"]
    assert all(torch.equal(weights[name], snapshots[2][name]) for name in weights)


def test_training_is_seeded(phantom_manifest):
    first = train_segmenter(TINY, phantom_manifest, "liver_only", LossMix(), _settings(1), seed=3)
    second = train_segmenter(TINY, phantom_manifest, "liver_only", LossMix(), _settings(1), seed=3)
    assert first.checkpoint.content_hash == second.checkpoint.content_hash


@pytest.mark.parametrize(("task", "num_classes"), [("liver_only", 2), ("multi_class", 5)])
def test_evaluation_reports_per_class_dice(phantom_manifest, task, num_classes):
    config = SegmenterConfig(num_classes=num_classes, num_levels=2, unet_width=4)
    result = train_segmenter(config, phantom_manifest, task, LossMix(), _settings(1), seed=0)
    scores = evaluate_segmenter(result.checkpoint, phantom_manifest, split="test")
    assert set(scores) == {"mean_dice", *(f"class_{k}" for k in range(1, num_classes))}
    assert all(0.0 <= value <= 1.0 for value in scores.values())
    assert load_segmenter(result.checkpoint).config.num_classes == num_classes


@pytest.mark.slow
@pytest.mark.parametrize("variant", ["unet", "resunet", "wideresunet", "dynunet", "vnet"])
def test_every_variant_overfits_training_phantoms(phantom_manifest, variant):
    config = SegmenterConfig(variant=variant, num_classes=2, num_levels=3, unet_width=8)
    result = train_segmenter(
        config,
        phantom_manifest,
        "liver_only",
        LossMix(),
        _settings(300),
        seed=0,
        patience=100,
        val_split="train",
    )
    assert len(phantom_manifest.select(split="train")) == 4
    assert result.best_val_dice > 0.95


def test_relabel_is_idempotent_and_keeps_background():
    background = LabelMap(np.zeros((2, 2, 2), dtype=np.uint8))
    assert np.array_equal(relabel_liver_only(background).data, background.data)
    label = LabelMap(np.random.default_rng(0).integers(0, 5, size=(3, 3, 3)))
    once = relabel_liver_only(label)
    assert np.array_equal(relabel_liver_only(once).data, once.data)
