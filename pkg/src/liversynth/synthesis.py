"""Two-stage synthesis: sample a label map, then render a paired volume conditioned on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping
from typing import Sequence

from .checkpoint import Checkpoint
from .checkpoint import LineageError
from .controlnet import ControlNet
from .controlnet import ModelCheckpoints
from .controlnet import conditional_sample
from .controlnet import encode_condition
from .controlnet import load_controlnet
from .core import LIVER
from .core import TUMOR
from .core import LabelMap
from .core import Volume
from .core import argmax_decode
from .dataset import DEGENERATE_FLAG
from .dataset import write_pair
from .diffusion import Denoiser
from .diffusion import LatentCodec
from .diffusion import NoiseSchedule
from .diffusion import Variance
from .diffusion import load_denoiser
from .diffusion import sample_latent
from .diffusion import schedule_from_checkpoint
from .manifest import DatasetManifest
from .manifest import ManifestRecord

logger = logging.getLogger(__name__)

VOLUME_SEED_OFFSET = 2**31


@dataclass
class SynthesisModels:
    label_codec: LatentCodec
    label_denoiser: Denoiser
    label_schedule: NoiseSchedule
    label_latent_shape: tuple[int, ...]
    image_codec: LatentCodec
    image_denoiser: Denoiser
    image_schedule: NoiseSchedule
    controlnet: ControlNet
    lineage: dict[str, str]
    label_variance: Variance = "posterior"
    image_variance: Variance = "posterior"

    @classmethod
    def from_checkpoints(cls, base: ModelCheckpoints, controlnet: Checkpoint) -> "SynthesisModels":
        expected = base.hashes()
        if controlnet.references != expected:
            mismatched = sorted(
                name for name in expected if controlnet.references.get(name) != expected[name]
            )
            raise LineageError(f"control branch was trained against different {', '.join(mismatched)}")
        return cls(
            label_codec=LatentCodec.from_checkpoints(base.label_vae, base.label_diffusion),
            label_denoiser=load_denoiser(base.label_diffusion),
            label_schedule=schedule_from_checkpoint(base.label_diffusion),
            label_latent_shape=tuple(base.label_diffusion.constants["latent_shape"]),
            image_codec=LatentCodec.from_checkpoints(base.image_vae, base.image_diffusion),
            image_denoiser=load_denoiser(base.image_diffusion),
            image_schedule=schedule_from_checkpoint(base.image_diffusion),
            controlnet=load_controlnet(controlnet),
            lineage={**expected, "controlnet": controlnet.content_hash},
            label_variance=base.label_diffusion.config["schedule"]["variance"],
            image_variance=base.image_diffusion.config["schedule"]["variance"],
        )


@dataclass(frozen=True)
class SyntheticPair:
    volume: Volume
    label: LabelMap
    label_seed: int
    volume_seed: int
    lineage: dict[str, str]


def generate_synthetic_label(models: SynthesisModels, seed: int) -> LabelMap:
    z = sample_latent(
        models.label_denoiser,
        models.label_schedule,
        (1, *models.label_latent_shape),
        seed,
        models.label_variance,
    )
    return argmax_decode(models.label_codec.decode(z)[0])


def generate_paired_volume(
    label: LabelMap,
    models: SynthesisModels,
    seed: int,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume:
    cond = encode_condition(label, models.label_codec)
    z = conditional_sample(
        models.image_denoiser, models.controlnet, cond, models.image_schedule, seed, models.image_variance
    )
    intensities = models.image_codec.decode(z)[0, 0].clamp(0.0, 1.0)
    return Volume(intensities.numpy(), spacing=spacing, normalized=True)


def generate_pair(
    models: SynthesisModels,
    label_seed: int,
    volume_seed: int,
    label: LabelMap | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> SyntheticPair:
    """One synthetic pair; pass `label` to re-render an existing label map."""
    if label is None:
        label = generate_synthetic_label(models, label_seed)
    volume = generate_paired_volume(label, models, volume_seed, spacing)
    return SyntheticPair(volume, label, label_seed, volume_seed, dict(models.lineage))


def synthesize_dataset(
    count: int,
    base_seed: int,
    models: SynthesisModels,
    out_dir: Path,
    *,
    real_labels: Sequence[LabelMap] | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> DatasetManifest:
    """Write `count` synthetic pairs with label seed base+i and volume seed base+i+2**31."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if real_labels is not None and not real_labels:
        raise ValueError("real_labels is empty")
    out_dir = Path(out_dir)
    records: list[ManifestRecord] = []
    degenerate = 0
    for index in range(count):
        label_seed = base_seed + index
        volume_seed = label_seed + VOLUME_SEED_OFFSET
        existing = real_labels[index % len(real_labels)] if real_labels else None
        pair = generate_pair(models, label_seed, volume_seed, existing, spacing)
        record_id = f"synthetic-{label_seed:08d}"
        volume_path, label_path = write_pair(
            out_dir,
            f"synthetic/{record_id}",
            pair.volume,
            pair.label,
            extra={"label_seed": label_seed, "volume_seed": volume_seed},
        )
        is_degenerate = not pair.label.contains(LIVER)
        degenerate += is_degenerate
        records.append(
            ManifestRecord(
                id=record_id,
                volume_path=volume_path,
                label_path=label_path,
                provenance="synthetic",
                split="train",
                seed=label_seed,
                flags={
                    DEGENERATE_FLAG: is_degenerate,
                    "has_tumor": pair.label.contains(TUMOR),
                    "rerendered": existing is not None,
                },
                lineage=pair.lineage,
            )
        )
    if degenerate:
        logger.warning("%d of %d synthetic labels contain no liver", degenerate, count)
    logger.info("Synthesized %d pairs under %s", count, out_dir)
    return DatasetManifest(records=records, base_dir=out_dir)


def verify_lineage(manifest: DatasetManifest, lineage: Mapping[str, str]) -> None:
    """Reject synthetic records that were not generated by the checkpoints in `lineage`."""
    for record in manifest.select(provenance="synthetic"):
        if record.lineage != dict(lineage):
            raise LineageError(f"record {record.id} was generated by different checkpoints")


def sample_unconditional_volume(
    models: SynthesisModels,
    seed: int,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Volume:
    """Image-stage sample with the control branch detached."""
    shape = (1, models.image_denoiser.config.latent_channels, *models.label_latent_shape[1:])
    z = sample_latent(models.image_denoiser, models.image_schedule, shape, seed, models.image_variance)
    intensities = models.image_codec.decode(z)[0, 0].clamp(0.0, 1.0)
    return Volume(intensities.numpy(), spacing=spacing, normalized=True)


def reconstruct_volume(models: SynthesisModels, volume: Volume) -> Volume:
    z = models.image_codec.encode(volume.to_tensor().unsqueeze(0))
    intensities = models.image_codec.decode(z)[0, 0].clamp(0.0, 1.0)
    return Volume(intensities.numpy(), spacing=volume.spacing, normalized=True)
