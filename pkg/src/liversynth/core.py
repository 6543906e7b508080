"""Volumetric data model shared by every stage: volumes, label maps and their encodings."""
from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field
from typing import Sequence

import numpy as np
import torch

BACKGROUND, LIVER, PORTAL_VEIN, HEPATIC_VEIN, TUMOR = range(5)
CLASS_NAMES = ("background", "liver", "portal_vein", "hepatic_vein", "tumor")
AXIS_NAMES = ("height", "width", "depth")


class VolumeError(ValueError):
    """Raised when a volume or label map violates its invariants."""


class ShapeMismatchError(VolumeError):
    """Raised when array shapes disagree; the message names the offending axis."""


def numpy_rng(seed: int) -> np.random.Generator:
    """Named, cross-platform bit generator (PCG64) used for all host-side randomness."""
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


@dataclass(frozen=True)
class VolumeShape:
    height: int
    width: int
    depth: int
    channels: int = 1

    def __post_init__(self) -> None:
        for name in ("height", "width", "depth", "channels"):
            if getattr(self, name) < 1:
                raise VolumeError(f"{name} must be >= 1, got {getattr(self, name)}")

    @classmethod
    def of(cls, spatial: Sequence[int], channels: int = 1) -> "VolumeShape":
        height, width, depth = (int(v) for v in spatial)
        return cls(height, width, depth, channels)

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.depth)

    def check_divisible(self, factor: int) -> None:
        check_divisible(self.spatial, factor)


def check_divisible(spatial: Sequence[int], factor: int) -> None:
    for name, extent in zip(AXIS_NAMES, spatial):
        if extent % factor:
            raise ShapeMismatchError(
                f"{name} axis has {extent} voxels, not divisible by {factor}"
            )


def check_same_spatial(expected: Sequence[int], actual: Sequence[int]) -> None:
    if len(expected) != len(actual):
        raise ShapeMismatchError(f"rank mismatch: {tuple(expected)} vs {tuple(actual)}")
    for name, want, got in zip(AXIS_NAMES, expected, actual):
        if want != got:
            raise ShapeMismatchError(f"{name} axis mismatch: expected {want}, got {got}")


@dataclass(frozen=True)
class Volume:
    """Rank-3 intensity field with voxel spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalized: bool = False

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be rank 3, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise VolumeError("volume contains non-finite values")
        if self.normalized and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise VolumeError(
                f"normalized volume outside [0, 1]: [{data.min()}, {data.max()}]"
            )
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> VolumeShape:
        return VolumeShape.of(self.data.shape)

    def to_tensor(self) -> torch.Tensor:
        """Channel-first tensor of shape (1, H, W, D)."""
        return torch.from_numpy(self.data.copy()).unsqueeze(0)


@dataclass(frozen=True)
class LabelMap:
    """Rank-3 integer class field."""

    data: np.ndarray
    num_classes: int = 5

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise VolumeError(f"label data must be rank 3, got shape {raw.shape}")
        if raw.dtype.kind == "f":
            if not np.isfinite(raw).all() or not np.array_equal(raw, np.round(raw)):
                raise VolumeError("label map contains non-integer values")
        elif raw.dtype.kind not in "iub":
            raise VolumeError(f"unsupported label dtype {raw.dtype}")
        if self.num_classes < 1 or self.num_classes > 256:
            raise VolumeError(f"num_classes must lie in [1, 256], got {self.num_classes}")
        if raw.size and (raw.min() < 0 or raw.max() >= self.num_classes):
            raise VolumeError(
                f"label values must lie in [0, {self.num_classes}), "
                f"found [{raw.min()}, {raw.max()}]"
            )
        object.__setattr__(self, "data", raw.astype(np.uint8))

    @property
    def shape(self) -> VolumeShape:
        return VolumeShape.of(self.data.shape)

    def contains(self, class_id: int) -> bool:
        return bool((self.data == class_id).any())

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.astype(np.int64))


@dataclass(frozen=True)
class OneHotLabel:
    data: np.ndarray = field(repr=False)

    @property
    def num_classes(self) -> int:
        return int(self.data.shape[0])

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data.copy())


def minmax_normalize(v: Volume) -> Volume:
    """Scale intensities to [0, 1]; a constant volume maps to zeros."""
    data = v.data.astype(np.float64)
    if not np.isfinite(data).all():
        raise VolumeError("cannot normalize a volume with non-finite values")
    low, high = data.min(), data.max()
    if high == low:
        scaled = np.zeros_like(data)
    else:
        scaled = (data - low) / (high - low)
    return Volume(scaled.astype(np.float32), spacing=v.spacing, normalized=True)


def crop_roi(v: Volume, center: Sequence[int], roi_shape: VolumeShape) -> Volume:
    """Cut an ROI of fixed extent centred on `center`, shifted inward at the borders."""
    if len(center) != 3:
        raise ValueError(f"center must have 3 coordinates, got {len(center)}")
    extents = v.data.shape
    slices = []
    for name, extent, size, middle in zip(AXIS_NAMES, extents, roi_shape.spatial, center):
        if size > extent:
            raise ShapeMismatchError(f"ROI {size} exceeds volume extent {extent} on {name} axis")
        start = int(middle) - size // 2
        start = min(max(start, 0), extent - size)
        slices.append(slice(start, start + size))
    return Volume(v.data[tuple(slices)].copy(), spacing=v.spacing, normalized=v.normalized)


def one_hot_encode(label: LabelMap) -> OneHotLabel:
    eye = np.eye(label.num_classes, dtype=np.float32)
    encoded = np.moveaxis(eye[label.data.astype(np.int64)], -1, 0)
    return OneHotLabel(np.ascontiguousarray(encoded))


def argmax_decode(o: np.ndarray | torch.Tensor) -> LabelMap:
    """Per-voxel argmax over the channel axis; ties go to the lowest class index."""
    if isinstance(o, torch.Tensor):
        o = o.detach().cpu().numpy()
    array = np.asarray(o)
    if array.ndim != 4:
        raise ShapeMismatchError(f"expected (classes, H, W, D), got shape {array.shape}")
    # np.argmax returns the first maximal index
    return LabelMap(np.argmax(array, axis=0).astype(np.uint8), num_classes=array.shape[0])
