"""Evaluation metrics: Dice overlap and slice-wise Fréchet distance."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from torch import nn

from .config import FeatureExtractorSpec
from .core import LabelMap
from .core import ShapeMismatchError
from .core import Volume
from .core import check_same_spatial
from .core import torch_generator

logger = logging.getLogger(__name__)

SliceAxis = Literal["axial", "sagittal", "coronal"]
# arrays are (H, W, D): coronal slices index H, sagittal W, axial D
SLICE_AXES: dict[str, int] = {"coronal": 0, "sagittal": 1, "axial": 2}
EIGENVALUE_TOLERANCE = 1e-6


class FrechetError(ValueError):
    """Raised when Fréchet statistics are unusable."""


def dice_coefficient(a: LabelMap, b: LabelMap, class_id: int) -> float:
    """2|A∩B| / (|A| + |B|) for one class; both masks empty counts as a perfect match."""
    check_same_spatial(a.data.shape, b.data.shape)
    mask_a = a.data == class_id
    mask_b = b.data == class_id
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((mask_a & mask_b).sum()) / total


def mean_foreground_dice(prediction: LabelMap, target: LabelMap, num_classes: int) -> float:
    scores = [dice_coefficient(prediction, target, class_id) for class_id in range(1, num_classes)]
    return float(np.mean(scores))


class SliceFeatureExtractor(nn.Module):
    """Frozen 2D conv stack with weights drawn from a fixed seed."""

    def __init__(self, spec: FeatureExtractorSpec) -> None:
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        in_channels = 1
        for width in spec.widths:
            layers += [nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.ReLU()]
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_channels, spec.output_dim)
        self._seed_parameters()
        self.eval()
        self.requires_grad_(False)

    def _seed_parameters(self) -> None:
        generator = torch_generator(self.spec.seed)
        with torch.no_grad():
            for name, parameter in self.named_parameters():
                if name.endswith("bias"):
                    parameter.copy_(0.1 * torch.randn(parameter.shape, generator=generator))
                else:
                    fan_in = parameter[0].numel()
                    parameter.copy_(torch.randn(parameter.shape, generator=generator) / math.sqrt(fan_in))

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        resized = F.interpolate(slices, size=self.spec.input_slice_size, mode="bilinear", align_corners=False)
        return self.head(self.features(resized).mean(dim=(2, 3)))


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self) -> None:
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise FrechetError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=0.0, atol=1e-8):
            raise FrechetError("covariance is not symmetric")


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Mean and unbiased covariance in float64, computed on shifted data for stability."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise FrechetError(f"need at least 2 feature rows, got shape {features.shape}")
    shifted = features - features[0]
    centered = shifted - shifted.mean(axis=0)
    covariance = centered.T @ centered / (features.shape[0] - 1)
    covariance = (covariance + covariance.T) / 2
    return GaussianStats(features.mean(axis=0), covariance, features.shape[0])


def volume_slices(volume: Volume, axis: SliceAxis) -> torch.Tensor:
    """All 2D slices along `axis` as a (N, 1, a, b) tensor."""
    data = np.moveaxis(volume.data, SLICE_AXES[axis], 0)
    return torch.from_numpy(np.ascontiguousarray(data)).unsqueeze(1)


def extract_slice_features(
    volumes: Sequence[Volume],
    axis: SliceAxis,
    spec: FeatureExtractorSpec,
    extractor: SliceFeatureExtractor | None = None,
) -> GaussianStats:
    if len(volumes) < 2:
        raise FrechetError(f"need at least 2 volumes for slice statistics, got {len(volumes)}")
    extractor = extractor or SliceFeatureExtractor(spec)
    with torch.no_grad():
        features = torch.cat([extractor(volume_slices(volume, axis)) for volume in volumes])
    return gaussian_stats(features.double().numpy())


def _psd_sqrt_eigenvalues(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values, vectors = linalg.eigh((matrix + matrix.T) / 2)
    scale = max(1.0, float(np.abs(values).max(initial=0.0)))
    if values.size and values.min() < -EIGENVALUE_TOLERANCE * scale:
        raise FrechetError(f"matrix square root failed: eigenvalue {values.min():.3e} is negative")
    return np.sqrt(np.clip(values, 0.0, None)), vectors


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), floored at zero."""
    if s1.mean.shape != s2.mean.shape:
        raise ShapeMismatchError(f"feature dims differ: {s1.mean.shape[0]} vs {s2.mean.shape[0]}")
    roots, vectors = _psd_sqrt_eigenvalues(s1.covariance)
    root1 = (vectors * roots) @ vectors.T
    cross_roots, _ = _psd_sqrt_eigenvalues(root1 @ s2.covariance @ root1)
    diff = s1.mean - s2.mean
    value = diff @ diff + np.trace(s1.covariance) + np.trace(s2.covariance) - 2.0 * cross_roots.sum()
    return max(float(value), 0.0)


@dataclass(frozen=True)
class FidReport:
    axial: float
    sagittal: float
    coronal: float
    average: float

    def as_dict(self) -> dict[str, float]:
        return {
            "axial": self.axial,
            "sagittal": self.sagittal,
            "coronal": self.coronal,
            "average": self.average,
        }


def fid_report(real: Sequence[Volume], synthetic: Sequence[Volume], spec: FeatureExtractorSpec) -> FidReport:
    extractor = SliceFeatureExtractor(spec)
    scores = {}
    for axis in ("axial", "sagittal", "coronal"):
        scores[axis] = frechet_distance(
            extract_slice_features(real, axis, spec, extractor),
            extract_slice_features(synthetic, axis, spec, extractor),
        )
    average = (scores["axial"] + scores["sagittal"] + scores["coronal"]) / 3
    logger.info("FID axial=%.4f sagittal=%.4f coronal=%.4f", scores["axial"], scores["sagittal"], scores["coronal"])
    return FidReport(average=average, **scores)
