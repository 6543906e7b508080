"""Label-conditioned control branch attached to a frozen image denoiser."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .checkpoint import module_hash
from .checkpoint import state_dict_copy
from .config import ControlNetConfig
from .config import ControlNetStageConfig
from .config import DenoiserConfig
from .core import LabelMap
from .core import ShapeMismatchError
from .core import check_same_spatial
from .core import one_hot_encode
from .core import torch_generator
from .dataset import load_pairs
from .diffusion import ControlResiduals
from .diffusion import Denoiser
from .diffusion import DenoiserEncoder
from .diffusion import LatentCodec
from .diffusion import NoiseSchedule
from .diffusion import Variance
from .diffusion import as_timesteps
from .diffusion import load_denoiser
from .diffusion import q_sample
from .diffusion import sample_latent
from .diffusion import sample_timesteps
from .diffusion import schedule_from_checkpoint
from .layers import zero_module
from .manifest import DatasetManifest
from .training import NonFiniteLossError
from .training import encode_in_chunks
from .training import fit

logger = logging.getLogger(__name__)


class FrozenBaseError(RuntimeError):
    """Raised when the frozen denoiser changed while training the control branch."""


@dataclass(frozen=True)
class ConditionTensor:
    """Scaled label latent, shape (B, C, h, w, d)."""

    data: torch.Tensor

    def __post_init__(self) -> None:
        if self.data.ndim != 5:
            raise ShapeMismatchError(f"condition must be (B, C, h, w, d), got {tuple(self.data.shape)}")

    @property
    def spatial(self) -> tuple[int, ...]:
        return tuple(self.data.shape[2:])


@dataclass
class ModelCheckpoints:
    label_vae: Checkpoint
    label_diffusion: Checkpoint
    image_vae: Checkpoint
    image_diffusion: Checkpoint

    def hashes(self) -> dict[str, str]:
        return {
            "label_vae": self.label_vae.content_hash,
            "label_diffusion": self.label_diffusion.content_hash,
            "image_vae": self.image_vae.content_hash,
            "image_diffusion": self.image_diffusion.content_hash,
        }


class ControlNet(nn.Module):
    """Trainable copy of the denoiser encoder with zero-initialized projections."""

    def __init__(self, base_config: DenoiserConfig, config: ControlNetConfig) -> None:
        super().__init__()
        self.base_config = base_config
        self.config = config
        self.encoder = DenoiserEncoder(base_config)
        self.condition_in = nn.Conv3d(config.condition_channels, base_config.width(0), 1)
        self.skip_projections = nn.ModuleList(
            nn.Conv3d(base_config.width(level), base_config.width(level), 1)
            for level in range(base_config.num_levels)
        )
        top = base_config.width(base_config.num_levels - 1)
        self.mid_projection = nn.Conv3d(top, top, 1)
        if config.zero_init:
            zero_module(self.condition_in)
            zero_module(self.skip_projections)
            zero_module(self.mid_projection)

    @classmethod
    def from_denoiser(cls, base: Denoiser, config: ControlNetConfig) -> "ControlNet":
        control = cls(base.config, config)
        control.encoder.load_state_dict(base.encoder.state_dict())
        return control

    def forward(self, z_t: torch.Tensor, t: int | torch.Tensor, condition: torch.Tensor) -> ControlResiduals:
        if condition.shape[1] != self.config.condition_channels:
            raise ShapeMismatchError(
                f"condition has {condition.shape[1]} channels, expected {self.config.condition_channels}"
            )
        features = self.encoder(z_t, as_timesteps(t, z_t.shape[0]), condition=self.condition_in(condition))
        return ControlResiduals(
            skips=[projection(skip) for projection, skip in zip(self.skip_projections, features.skips)],
            mid=self.mid_projection(features.hidden),
        )


def encode_condition(label: LabelMap, label_codec: LatentCodec) -> ConditionTensor:
    one_hot = one_hot_encode(label).to_tensor().unsqueeze(0)
    return ConditionTensor(label_codec.encode(one_hot))


def conditioned_predict_noise(
    base: Denoiser,
    control: ControlNet,
    z_t: torch.Tensor,
    t: int | torch.Tensor,
    cond: ConditionTensor,
) -> torch.Tensor:
    check_same_spatial(cond.spatial, z_t.shape[2:])
    condition = cond.data
    if condition.shape[0] != z_t.shape[0]:
        if condition.shape[0] != 1:
            raise ShapeMismatchError(f"condition batch {condition.shape[0]} vs latent batch {z_t.shape[0]}")
        condition = condition.expand(z_t.shape[0], *condition.shape[1:])
    timesteps = as_timesteps(t, z_t.shape[0])
    return base(z_t, timesteps, residuals=control(z_t, timesteps, condition))


def conditioned_mse(
    base: Denoiser,
    control: ControlNet,
    z0: torch.Tensor,
    cond: ConditionTensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    timesteps = as_timesteps(t, z0.shape[0])
    z_t = q_sample(z0, timesteps, noise, schedule)
    loss = F.mse_loss(conditioned_predict_noise(base, control, z_t, timesteps, cond), noise)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("control loss is not finite", components={"loss": float(loss)})
    return loss


def controlnet_loss(
    base: Denoiser,
    control: ControlNet,
    x: torch.Tensor,
    label: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    image_codec: LatentCodec,
    label_codec: LatentCodec,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE for paired volumes (B, 1, H, W, D) and labels (B, H, W, D)."""
    check_same_spatial(x.shape[2:], label.shape[1:])
    num_classes = label_codec.autoencoder.config.in_channels
    one_hot = F.one_hot(label.long(), num_classes).permute(0, 4, 1, 2, 3).float()
    cond = ConditionTensor(label_codec.encode(one_hot))
    return conditioned_mse(base, control, image_codec.encode(x), cond, t, noise, schedule)


def conditional_sample(
    base: Denoiser,
    control: ControlNet,
    cond: ConditionTensor,
    schedule: NoiseSchedule,
    seed: int,
    variance: Variance = "posterior",
) -> torch.Tensor:
    shape = (cond.data.shape[0], base.config.latent_channels, *cond.spatial)
    predictor = partial(conditioned_predict_noise, base, control, cond=cond)
    return sample_latent(predictor, schedule, shape, seed, variance)


def train_controlnet(
    stage_config: ControlNetStageConfig,
    checkpoints: ModelCheckpoints,
    manifest: DatasetManifest,
    *,
    seed: int,
    split: str = "train",
) -> Checkpoint:
    image_codec = LatentCodec.from_checkpoints(checkpoints.image_vae, checkpoints.image_diffusion)
    label_codec = LatentCodec.from_checkpoints(checkpoints.label_vae, checkpoints.label_diffusion)
    base = load_denoiser(checkpoints.image_diffusion)
    schedule = schedule_from_checkpoint(checkpoints.image_diffusion)
    settings = stage_config.optimizer

    pairs = load_pairs(manifest, split)
    num_classes = label_codec.autoencoder.config.in_channels
    latents = encode_in_chunks(image_codec.encode, pairs.volumes, settings.batch_size)
    conditions = encode_in_chunks(label_codec.encode, pairs.inputs("label", num_classes), settings.batch_size)

    torch.manual_seed(seed)
    control = ControlNet.from_denoiser(base, stage_config.model)
    generator = torch_generator(seed)
    frozen_before = module_hash(base)

    def batch_loss(indices: torch.Tensor, generator: torch.Generator) -> dict[str, torch.Tensor]:
        z0 = latents[indices]
        t = sample_timesteps(len(indices), schedule.num_timesteps, generator)
        noise = torch.randn(z0.shape, generator=generator)
        loss = conditioned_mse(base, control, z0, ConditionTensor(conditions[indices]), t, noise, schedule)
        return {"loss": loss}

    logger.info("Training control branch on %d pairs", len(pairs))
    history = fit("controlnet", control.parameters(), settings, len(pairs), batch_loss, generator)
    if module_hash(base) != frozen_before:
        raise FrozenBaseError("base denoiser weights changed during control training")
    return Checkpoint(
        kind="controlnet",
        config={
            "base": base.config.model_dump(mode="json"),
            "control": stage_config.model.model_dump(mode="json"),
        },
        weights={"controlnet": state_dict_copy(control)},
        history=history,
        constants={"seed": seed},
        references=checkpoints.hashes(),
    )


def load_controlnet(checkpoint: Checkpoint) -> ControlNet:
    checkpoint.require_kind("controlnet")
    control = ControlNet(
        DenoiserConfig.model_validate(checkpoint.config["base"]),
        ControlNetConfig.model_validate(checkpoint.config["control"]),
    )
    control.load_state_dict(checkpoint.weights["controlnet"])
    control.eval()
    control.requires_grad_(False)
    return control
