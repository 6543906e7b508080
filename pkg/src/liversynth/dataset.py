"""Reading and writing paired records referenced by a manifest."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .core import LabelMap
from .core import Volume
from .fvol import read_fvol
from .fvol import write_fvol
from .manifest import DatasetManifest
from .manifest import ManifestError
from .manifest import ManifestRecord

DEGENERATE_FLAG = "degenerate_label"


@dataclass
class PairedTensors:
    """Stacked volumes (N, 1, H, W, D) and labels (N, H, W, D)."""

    volumes: torch.Tensor
    labels: torch.Tensor
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def inputs(self, stage: Literal["label", "image"], num_classes: int = 5) -> torch.Tensor:
        """Autoencoder inputs: the volumes, or one-hot labels for the label stage."""
        if stage == "image":
            return self.volumes
        one_hot = F.one_hot(self.labels, num_classes)
        return one_hot.permute(0, 4, 1, 2, 3).contiguous().float()


def write_pair(
    base_dir: Path,
    relative_stem: str,
    volume: Volume,
    label: LabelMap,
    extra: dict | None = None,
) -> tuple[str, str]:
    volume_rel = f"{relative_stem}_image.fvol"
    label_rel = f"{relative_stem}_label.fvol"
    meta = dict(extra or {})
    write_fvol(base_dir / volume_rel, volume.data, volume.spacing, {**meta, "normalized": volume.normalized})
    write_fvol(base_dir / label_rel, label.data, volume.spacing, {**meta, "num_classes": label.num_classes})
    return volume_rel, label_rel


def load_record(manifest: DatasetManifest, record: ManifestRecord) -> tuple[Volume, LabelMap]:
    volume_file = read_fvol(manifest.resolve(record.volume_path))
    label_file = read_fvol(manifest.resolve(record.label_path))
    volume = Volume(
        volume_file.data,
        spacing=volume_file.spacing,
        normalized=bool(volume_file.extra.get("normalized", False)),
    )
    label = LabelMap(label_file.data, num_classes=int(label_file.extra.get("num_classes", 5)))
    if volume.shape.spatial != label.shape.spatial:
        raise ManifestError(
            f"record {record.id}: volume {volume.shape.spatial} and label "
            f"{label.shape.spatial} are not paired"
        )
    return volume, label


def stack_records(manifest: DatasetManifest, records: Iterable[ManifestRecord]) -> PairedTensors:
    volumes: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    ids: list[str] = []
    for record in records:
        volume, label = load_record(manifest, record)
        volumes.append(volume.data)
        labels.append(label.data)
        ids.append(record.id)
    if not ids:
        raise ManifestError("no records selected")
    return PairedTensors(
        volumes=torch.from_numpy(np.stack(volumes)).unsqueeze(1),
        labels=torch.from_numpy(np.stack(labels).astype(np.int64)),
        ids=ids,
    )


def load_pairs(
    manifest: DatasetManifest,
    split: str | None = "train",
    include_degenerate: bool = False,
) -> PairedTensors:
    excluded = () if include_degenerate else (DEGENERATE_FLAG,)
    return stack_records(manifest, manifest.select(split=split, exclude_flags=excluded))
