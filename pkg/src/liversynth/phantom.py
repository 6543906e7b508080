"""Deterministic liver phantoms: paired volumes and 5-class label maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .config import PhantomParams
from .core import BACKGROUND
from .core import HEPATIC_VEIN
from .core import LIVER
from .core import PORTAL_VEIN
from .core import TUMOR
from .core import LabelMap
from .core import Volume
from .core import minmax_normalize
from .core import numpy_rng
from .dataset import write_pair
from .manifest import SPLITS
from .manifest import DatasetManifest
from .manifest import ManifestRecord

logger = logging.getLogger(__name__)

_WOBBLE_TERMS = 3


@dataclass(frozen=True)
class PhantomSample:
    volume: Volume
    label: LabelMap
    seed: int
    has_tumor: bool


def generate_phantom(seed: int, params: PhantomParams) -> PhantomSample:
    rng = numpy_rng(seed)
    grid = np.stack(
        np.meshgrid(*(np.arange(n, dtype=np.float64) for n in params.roi_shape), indexing="ij")
    )
    envelope = _liver_envelope(rng, grid, params)
    label = np.where(envelope, LIVER, BACKGROUND).astype(np.uint8)

    low, high = params.vessel_count_range
    for class_id in (PORTAL_VEIN, HEPATIC_VEIN):
        for _ in range(int(rng.integers(low, high, endpoint=True))):
            label[_vessel_tree(rng, grid, envelope, params) & envelope] = class_id

    has_tumor = False
    if rng.random() < params.tumor_probability:
        tumor = _tumor_blob(rng, grid, envelope, params)
        if tumor is not None:
            label[tumor] = TUMOR
            has_tumor = True

    label = _merge_liver_islands(label)
    volume = _render(rng, grid, label, params)
    return PhantomSample(
        volume=volume,
        label=LabelMap(label, num_classes=5),
        seed=seed,
        has_tumor=has_tumor,
    )


def _liver_envelope(rng: np.random.Generator, grid: np.ndarray, params: PhantomParams) -> np.ndarray:
    """Randomly deformed ellipsoid reduced to its largest 6-connected component."""
    extents = np.array(params.roi_shape, dtype=np.float64)
    axes_max = np.array(params.liver_axes_max)
    slack = np.maximum(0.0, extents / 2 - axes_max * (1.0 + params.liver_deformation) - 1.0)
    center = (extents - 1.0) / 2 + rng.uniform(-slack, slack)
    axes = rng.uniform(params.liver_axes_min, params.liver_axes_max)

    offsets = (grid - center[:, None, None, None]) / axes[:, None, None, None]
    radius = np.sqrt((offsets**2).sum(axis=0))
    direction = offsets / np.maximum(radius, 1e-9)

    frequencies = rng.normal(0.0, 2.0, size=(_WOBBLE_TERMS, 3))
    phases = rng.uniform(0.0, 2 * np.pi, size=_WOBBLE_TERMS)
    weights = rng.uniform(-1.0, 1.0, size=_WOBBLE_TERMS)
    weights /= max(np.abs(weights).sum(), 1e-9)
    angles = np.tensordot(frequencies, direction, axes=(1, 0)) + phases[:, None, None, None]
    wobble = np.tensordot(weights, np.sin(angles), axes=(0, 0))

    mask = radius <= 1.0 + params.liver_deformation * wobble
    return _largest_component(mask)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    components, count = ndimage.label(mask)
    if count <= 1:
        return mask
    sizes = np.bincount(components.ravel())[1:]
    return components == int(np.argmax(sizes)) + 1


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])


def _sweep(grid: np.ndarray, points: Sequence[np.ndarray], radius: float) -> np.ndarray:
    mask = np.zeros(grid.shape[1:], dtype=bool)
    for point in points:
        mask |= ((grid - point[:, None, None, None]) ** 2).sum(axis=0) <= radius**2
    return mask


def _walk(rng: np.random.Generator, start: np.ndarray, direction: np.ndarray, steps: int) -> list[np.ndarray]:
    points = [start]
    position = start
    for _ in range(steps):
        direction = _unit(direction + rng.normal(0.0, 0.3, size=3))
        position = position + direction
        points.append(position)
    return points


def _vessel_tree(
    rng: np.random.Generator, grid: np.ndarray, envelope: np.ndarray, params: PhantomParams
) -> np.ndarray:
    """A tube swept along a jittered walk with one side branch."""
    candidates = np.argwhere(envelope)
    start = candidates[int(rng.integers(len(candidates)))].astype(np.float64)
    radius = float(rng.uniform(*params.vessel_radius_range))
    length = int(rng.integers(params.vessel_length_range[0], params.vessel_length_range[1], endpoint=True))
    trunk = _walk(rng, start, _unit(rng.normal(size=3)), length)
    points = list(trunk)
    if length > 1:
        fork = trunk[int(rng.integers(1, length))]
        points.extend(_walk(rng, fork, _unit(rng.normal(size=3)), max(1, length // 2)))
    return _sweep(grid, points, radius)


def _tumor_blob(
    rng: np.random.Generator, grid: np.ndarray, envelope: np.ndarray, params: PhantomParams
) -> np.ndarray | None:
    """A ball whose centre is deeper inside the liver than its radius."""
    depth = ndimage.distance_transform_edt(envelope)
    radius = float(rng.uniform(*params.tumor_radius_range))
    if not (depth >= radius + 1.0).any():
        radius = float(depth.max()) - 1.0
        if radius < 1.0:
            return None
    candidates = np.argwhere(depth >= radius + 1.0)
    center = candidates[int(rng.integers(len(candidates)))].astype(np.float64)
    return _sweep(grid, [center], radius) & envelope


def _merge_liver_islands(label: np.ndarray) -> np.ndarray:
    """Keep one liver component; cut-off liver islands join the structure around them."""
    components, count = ndimage.label(label == LIVER)
    if count <= 1:
        return label
    sizes = np.bincount(components.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    merged = label.copy()
    for index in range(1, count + 1):
        if index == keep:
            continue
        island = components == index
        rim = ndimage.binary_dilation(island) & ~island
        neighbours = label[rim]
        neighbours = neighbours[neighbours > LIVER]
        merged[island] = np.bincount(neighbours).argmax() if neighbours.size else BACKGROUND
    return merged


def _render(rng: np.random.Generator, grid: np.ndarray, label: np.ndarray, params: PhantomParams) -> Volume:
    """Class means times a smooth quadratic bias field, plus Gaussian noise, min-max scaled."""
    means = np.array(params.intensity_means.as_tuple())
    extents = np.array(params.roi_shape, dtype=np.float64)
    scale = np.where(extents > 1, extents - 1.0, 1.0)
    x, y, z = (grid / scale[:, None, None, None]) * 2.0 - 1.0
    monomials = np.stack([x, y, z, x * x, y * y, z * z, x * y, x * z, y * z])
    coefficients = rng.uniform(-1.0, 1.0, size=len(monomials)) / len(monomials)
    bias = 1.0 + params.bias_field_amplitude * np.tensordot(coefficients, monomials, axes=(0, 0))
    noise = rng.normal(0.0, params.noise_sigma, size=label.shape)
    raw = means[label] * bias + noise
    return minmax_normalize(Volume(raw, spacing=params.spacing))


def generate_phantom_dataset(
    count: int,
    base_seed: int,
    params: PhantomParams,
    splits: tuple[int, int, int],
    out_dir: Path,
) -> DatasetManifest:
    """Write `count` phantoms under `out_dir` and list them, split in seed order."""
    if count < 1 or sum(splits) != count or any(n < 0 for n in splits):
        raise ValueError(f"split counts {splits} must be non-negative and sum to {count}")
    out_dir = Path(out_dir)
    assignments = [split for split, n in zip(SPLITS, splits) for _ in range(n)]
    records: list[ManifestRecord] = []
    for index, split in enumerate(assignments):
        seed = base_seed + index
        sample = generate_phantom(seed, params)
        record_id = f"phantom-{seed:08d}"
        volume_path, label_path = write_pair(
            out_dir, f"phantom/{record_id}", sample.volume, sample.label, extra={"seed": seed}
        )
        records.append(
            ManifestRecord(
                id=record_id,
                volume_path=volume_path,
                label_path=label_path,
                provenance="phantom",
                split=split,
                seed=seed,
                flags={"has_tumor": sample.has_tumor},
            )
        )
    logger.info("Generated %d phantoms (splits %s) under %s", count, splits, out_dir)
    return DatasetManifest(records=records, base_dir=out_dir)
