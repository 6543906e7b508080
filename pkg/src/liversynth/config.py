"""Configuration loading for liversynth experiments."""
from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any
from typing import Literal

import yaml
from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError
from pydantic import model_validator

NUM_CLASSES = 5
UNET_DEFAULT_WIDTH = 16
RUN_ROOT_ENV = "LIVERSYNTH_RUN_ROOT"

SegmenterVariant = Literal["unet", "resunet", "wideresunet", "dynunet", "vnet"]
SegmentationTask = Literal["liver_only", "multi_class"]
ALL_VARIANTS: tuple[SegmenterVariant, ...] = ("unet", "resunet", "wideresunet", "dynunet", "vnet")
ALL_TASKS: tuple[SegmentationTask, ...] = ("liver_only", "multi_class")


def default_run_root() -> Path:
    return Path(os.getenv(RUN_ROOT_ENV, "~/.liversynth/runs"))


class IntensityMeans(BaseModel):
    """Per-class mean intensity of phantom tissue before bias and noise."""

    background: float = Field(default=0.05, ge=0.0, le=1.0)
    liver: float = Field(default=0.55, ge=0.0, le=1.0)
    portal_vein: float = Field(default=0.75, ge=0.0, le=1.0)
    hepatic_vein: float = Field(default=0.70, ge=0.0, le=1.0)
    tumor: float = Field(default=0.30, ge=0.0, le=1.0)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.background, self.liver, self.portal_vein, self.hepatic_vein, self.tumor)

    @model_validator(mode="after")
    def _separable(self) -> "IntensityMeans":
        values = self.as_tuple()
        for i, first in enumerate(values):
            for second in values[i + 1 :]:
                # 0.75 - 0.70 is 0.0499999... in binary floating point
                if abs(first - second) < 0.05 - 1e-9:
                    raise ValueError(
                        f"intensity means {first} and {second} are closer than 0.05"
                    )
        return self


class PhantomParams(BaseModel):
    """Priors of the procedural liver phantom."""

    roi_shape: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    liver_axes_min: tuple[float, float, float] = (10.0, 10.0, 5.0)
    liver_axes_max: tuple[float, float, float] = (12.0, 12.0, 6.0)
    liver_deformation: float = Field(default=0.15, ge=0.0, lt=0.5)
    vessel_count_range: tuple[int, int] = (1, 2)
    vessel_radius_range: tuple[float, float] = (1.0, 1.6)
    vessel_length_range: tuple[int, int] = (6, 12)
    tumor_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    tumor_radius_range: tuple[float, float] = (1.5, 3.0)
    intensity_means: IntensityMeans = Field(default_factory=IntensityMeans)
    noise_sigma: float = Field(default=0.02, ge=0.0)
    bias_field_amplitude: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "PhantomParams":
        if any(dim < 1 for dim in self.roi_shape):
            raise ValueError(f"roi_shape must be positive, got {self.roi_shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        ranges = {
            "vessel_count_range": self.vessel_count_range,
            "vessel_radius_range": self.vessel_radius_range,
            "vessel_length_range": self.vessel_length_range,
            "tumor_radius_range": self.tumor_radius_range,
        }
        for name, (low, high) in ranges.items():
            if low > high or low < 0:
                raise ValueError(f"{name} is empty or negative: ({low}, {high})")
        for axis, (low, high, extent) in enumerate(
            zip(self.liver_axes_min, self.liver_axes_max, self.roi_shape)
        ):
            if not 0 < low <= high:
                raise ValueError(f"liver semi-axis range on axis {axis} is empty: ({low}, {high})")
            if high * (1.0 + self.liver_deformation) >= extent / 2:
                raise ValueError(
                    f"liver semi-axis {high} (deformation {self.liver_deformation}) "
                    f"does not fit ROI extent {extent} on axis {axis}"
                )
        return self


class AutoencoderConfig(BaseModel):
    """3D VAE compressing volumes or one-hot labels into the diffusion latent space."""

    in_channels: int = Field(default=1, ge=1)
    latent_channels: int = Field(default=4, ge=1)
    downsample_factor: int = 4
    base_width: int = Field(default=16, ge=1)
    kl_weight: float = Field(default=1e-7, ge=0.0)
    stage: Literal["label", "image"] = "image"
    reconstruction: Literal["mse", "l1"] = "mse"

    @model_validator(mode="after")
    def _power_of_two(self) -> "AutoencoderConfig":
        factor = self.downsample_factor
        if factor < 1 or factor & (factor - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {factor}")
        return self

    @property
    def num_levels(self) -> int:
        return int(math.log2(self.downsample_factor))


class DenoiserConfig(BaseModel):
    """Time-conditioned latent U-Net predicting the injected noise."""

    latent_channels: int = Field(default=4, ge=1)
    base_width: int = Field(default=16, ge=1)
    num_levels: int = Field(default=2, ge=1)
    time_embedding_dim: int = Field(default=32, ge=2)
    attention_levels: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_levels(self) -> "DenoiserConfig":
        if self.time_embedding_dim % 2:
            raise ValueError("time_embedding_dim must be even")
        for level in self.attention_levels:
            if not 0 <= level < self.num_levels:
                raise ValueError(f"attention level {level} outside [0, {self.num_levels})")
        return self

    def width(self, level: int) -> int:
        return self.base_width * 2**level


class ScheduleConfig(BaseModel):
    num_timesteps: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: Literal["linear", "scaled_linear"] = "linear"
    variance: Literal["posterior", "beta"] = "posterior"


class ControlNetConfig(BaseModel):
    condition_channels: int = Field(default=4, ge=1)
    zero_init: bool = True


class OptimizerSettings(BaseModel):
    """AdamW settings and epoch budget of one training stage."""

    learning_rate: float = Field(default=1e-4, ge=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = Field(default=1, ge=0)
    batch_size: int = Field(default=2, ge=1)
    seed: int | None = None
    log_every: int = Field(default=10, ge=1)


class VaeStageConfig(BaseModel):
    model: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    optimizer: OptimizerSettings = Field(
        default_factory=lambda: OptimizerSettings(learning_rate=1e-6, epochs=2000)
    )


class DiffusionStageConfig(BaseModel):
    model: DenoiserConfig = Field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerSettings = Field(
        default_factory=lambda: OptimizerSettings(learning_rate=1e-5, epochs=4000)
    )


class ControlNetStageConfig(BaseModel):
    model: ControlNetConfig = Field(default_factory=ControlNetConfig)
    optimizer: OptimizerSettings = Field(
        default_factory=lambda: OptimizerSettings(learning_rate=1e-5, epochs=5000)
    )


class SegmenterConfig(BaseModel):
    """One member of the 3D U-Net zoo."""

    variant: SegmenterVariant = "unet"
    in_channels: int = Field(default=1, ge=1, le=1)
    num_classes: int = Field(default=2, ge=2)
    base_width: int | None = None
    num_levels: int = Field(default=4, ge=1)
    activation: Literal["relu", "prelu"] | None = None
    # width of the plain unet in the same zoo
    unet_width: int = Field(default=UNET_DEFAULT_WIDTH, ge=1)

    @model_validator(mode="after")
    def _resolve_variant_defaults(self) -> "SegmenterConfig":
        if self.variant == "vnet":
            if self.activation == "relu":
                raise ValueError("vnet requires prelu activations")
            self.activation = "prelu"
        elif self.activation is None:
            self.activation = "relu"
        if self.base_width is None:
            factor = 2 if self.variant == "wideresunet" else 1
            self.base_width = self.unet_width * factor
        if self.variant == "wideresunet" and self.base_width < 2 * self.unet_width:
            raise ValueError(
                f"wideresunet needs base_width >= {2 * self.unet_width}, got {self.base_width}"
            )
        return self


class DiceLossConfig(BaseModel):
    smoothing_epsilon: float = Field(default=1e-6, gt=0.0)
    reduction: Literal["mean_over_classes", "foreground_only"] = "foreground_only"


class LossMix(BaseModel):
    """Weights of the Dice and cross-entropy terms of the segmentation loss."""

    dice_weight: float = Field(default=1.0, ge=0.0)
    ce_weight: float = Field(default=1.0, ge=0.0)

    @model_validator(mode="after")
    def _not_empty(self) -> "LossMix":
        if self.dice_weight == 0 and self.ce_weight == 0:
            raise ValueError("at least one of dice_weight and ce_weight must be positive")
        return self


class SegmentationStageConfig(BaseModel):
    variants: list[SegmenterVariant] = Field(default_factory=lambda: list(ALL_VARIANTS))
    tasks: list[SegmentationTask] = Field(default_factory=lambda: list(ALL_TASKS))
    num_levels: int = Field(default=4, ge=1)
    base_width: int | None = None
    patience: int = Field(default=10, ge=1)
    loss_mix: LossMix = Field(default_factory=LossMix)
    dice: DiceLossConfig = Field(default_factory=DiceLossConfig)
    optimizer: OptimizerSettings = Field(
        default_factory=lambda: OptimizerSettings(learning_rate=1e-4, epochs=200)
    )

    def segmenter_config(self, variant: SegmenterVariant, task: SegmentationTask) -> SegmenterConfig:
        return SegmenterConfig(
            variant=variant,
            num_classes=2 if task == "liver_only" else NUM_CLASSES,
            num_levels=self.num_levels,
            unet_width=self.base_width or UNET_DEFAULT_WIDTH,
        )


class FeatureExtractorSpec(BaseModel):
    """Frozen, seeded 2D convolutional feature extractor used for slice FID."""

    seed: int = Field(default=0, ge=0)
    output_dim: int = Field(default=64, ge=1)
    input_slice_size: tuple[int, int] = (32, 32)
    widths: tuple[int, ...] = (8, 16, 32)


class DataConfig(BaseModel):
    count: int = Field(default=720, ge=1)
    base_seed: int = Field(default=0, ge=0)
    splits: tuple[int, int, int] = (504, 72, 144)

    @model_validator(mode="after")
    def _splits_sum(self) -> "DataConfig":
        if sum(self.splits) != self.count:
            raise ValueError(f"split counts {self.splits} do not sum to count {self.count}")
        if any(n < 0 for n in self.splits):
            raise ValueError(f"split counts must be non-negative, got {self.splits}")
        return self


class SynthesisConfig(BaseModel):
    count: int | None = Field(default=None, ge=1)
    synthetic_ratio: float = Field(default=1.0, ge=0.0)
    base_seed: int = Field(default=1_000_000, ge=0)
    rerender_real_labels: bool = False
    include_degenerate: bool = False

    def resolved_count(self, real_train_count: int) -> int:
        if self.count is not None:
            return self.count
        return max(1, round(self.synthetic_ratio * real_train_count))


def _label_vae() -> VaeStageConfig:
    return VaeStageConfig(model=AutoencoderConfig(in_channels=NUM_CLASSES, stage="label"))


class ExperimentConfig(BaseModel):
    """Top-level experiment configuration."""

    name: str = "default"
    run_root: Path = Field(default_factory=default_run_root)
    seed: int = Field(default=0, ge=0)
    phantom: PhantomParams = Field(default_factory=PhantomParams)
    data: DataConfig = Field(default_factory=DataConfig)
    label_vae: VaeStageConfig = Field(default_factory=_label_vae)
    image_vae: VaeStageConfig = Field(default_factory=VaeStageConfig)
    label_diffusion: DiffusionStageConfig = Field(default_factory=DiffusionStageConfig)
    image_diffusion: DiffusionStageConfig = Field(default_factory=DiffusionStageConfig)
    controlnet: ControlNetStageConfig = Field(default_factory=ControlNetStageConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    segmentation: SegmentationStageConfig = Field(default_factory=SegmentationStageConfig)
    metrics: FeatureExtractorSpec = Field(default_factory=FeatureExtractorSpec)

    model_config = {"arbitrary_types_allowed": True}

    @model_validator(mode="after")
    def _check_compatibility(self) -> "ExperimentConfig":
        label, image = self.label_vae.model, self.image_vae.model
        if label.stage != "label" or label.in_channels != NUM_CLASSES:
            raise ValueError(f"label_vae must be a label-stage model with {NUM_CLASSES} input channels")
        if image.stage != "image" or image.in_channels != 1:
            raise ValueError("image_vae must be an image-stage model with 1 input channel")
        if label.downsample_factor != image.downsample_factor:
            raise ValueError("label and image autoencoders must share downsample_factor")
        for axis, extent in enumerate(self.phantom.roi_shape):
            if extent % image.downsample_factor:
                raise ValueError(
                    f"ROI extent {extent} on axis {axis} is not divisible by "
                    f"downsample_factor {image.downsample_factor}"
                )
        pairs = (
            ("label_diffusion", self.label_diffusion.model, label),
            ("image_diffusion", self.image_diffusion.model, image),
        )
        for name, denoiser, vae in pairs:
            if denoiser.latent_channels != vae.latent_channels:
                raise ValueError(f"{name}.model.latent_channels must equal its autoencoder's")
            step = 2 ** (denoiser.num_levels - 1)
            for axis, extent in enumerate(self.latent_spatial_shape()):
                if extent % step:
                    raise ValueError(
                        f"{name}: latent extent {extent} on axis {axis} not divisible by {step}"
                    )
        if self.controlnet.model.condition_channels != label.latent_channels:
            raise ValueError("controlnet condition_channels must equal label latent_channels")
        return self

    def latent_spatial_shape(self) -> tuple[int, int, int]:
        factor = self.image_vae.model.downsample_factor
        h, w, d = self.phantom.roi_shape
        return (h // factor, w // factor, d // factor)

    def run_dir(self) -> Path:
        return self.run_root.expanduser() / self.name

    def stage_seed(self, settings: OptimizerSettings, offset: int) -> int:
        return settings.seed if settings.seed is not None else self.seed + offset


def load_yaml(path: Path) -> Any:
    with path.open("r", encoding="utf-8") as handle:
        return yaml.safe_load(handle)


def load_experiment_config(path: Path) -> ExperimentConfig:
    raw = load_yaml(path)
    try:
        config = ExperimentConfig.model_validate(raw or {})
    except ValidationError as exc:
        raise ValueError(f"Invalid experiment config at {path}: {exc}") from exc
    return config


def dump_config(config: ExperimentConfig, path: Path) -> None:
    payload = config.model_dump(mode="json")
    with path.open("w", encoding="utf-8") as handle:
        yaml.safe_dump(payload, handle, sort_keys=True)
