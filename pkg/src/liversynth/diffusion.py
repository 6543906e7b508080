"""DDPM latent diffusion: noise schedule, denoiser, training loss and ancestral sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Literal
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import Autoencoder
from .autoencoder import load_autoencoder
from .checkpoint import Checkpoint
from .checkpoint import LineageError
from .checkpoint import state_dict_copy
from .config import DenoiserConfig
from .config import DiffusionStageConfig
from .core import ShapeMismatchError
from .core import torch_generator
from .dataset import load_pairs
from .layers import AttentionBlock3d
from .layers import Downsample3d
from .layers import ResBlock3d
from .layers import Upsample3d
from .layers import group_norm
from .layers import sinusoidal_embedding
from .manifest import DatasetManifest
from .training import NonFiniteLossError
from .training import encode_in_chunks
from .training import fit

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
Variance = Literal["posterior", "beta"]


class ScheduleError(ValueError):
    """Raised for invalid noise schedules or out-of-range timesteps."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Betas with derived alphas and cumulative products, in float64, indexed by t in [1, T]."""

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @classmethod
    def from_betas(cls, betas: Sequence[float] | torch.Tensor) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ScheduleError("schedule needs at least one timestep")
        if not ((betas > 0) & (betas < 1)).all():
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        if (betas[1:] < betas[:-1]).any():
            raise ScheduleError("betas must be non-decreasing")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.numel())

    def check(self, t: int | torch.Tensor) -> None:
        values = torch.as_tensor(t)
        if values.numel() and (int(values.min()) < 1 or int(values.max()) > self.num_timesteps):
            raise ScheduleError(f"timestep outside [1, {self.num_timesteps}]: {values.tolist()}")

    def beta(self, t: int) -> float:
        self.check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to t; alpha_bar(0) is 1."""
        if t == 0:
            return 1.0
        self.check(t)
        return float(self.alpha_bars[t - 1])


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    kind: Literal["linear", "scaled_linear"] = "linear",
) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "scaled_linear":
        betas = torch.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=torch.float64) ** 2
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule.from_betas(betas)


def as_timesteps(t: int | torch.Tensor, batch: int) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(torch.long).flatten()
        if t.numel() == 1:
            return t.expand(batch)
        if t.numel() != batch:
            raise ShapeMismatchError(f"{t.numel()} timesteps for a batch of {batch}")
        return t
    return torch.full((batch,), int(t), dtype=torch.long)


def _broadcast(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))


def q_sample(
    z0: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Closed-form forward noising: sqrt(ab) * z0 + sqrt(1 - ab) * noise."""
    if z0.shape != noise.shape:
        raise ShapeMismatchError(f"noise {tuple(noise.shape)} does not match latent {tuple(z0.shape)}")
    timesteps = as_timesteps(t, z0.shape[0])
    schedule.check(timesteps)
    alpha_bar = schedule.alpha_bars[timesteps - 1]
    return _broadcast(alpha_bar.sqrt(), z0) * z0 + _broadcast((1.0 - alpha_bar).sqrt(), z0) * noise


def sample_timesteps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(1, T + 1, (n,), generator=generator)


@dataclass
class ControlResiduals:
    """Per-level skip residuals plus a bottleneck residual added to the denoiser."""

    skips: list[torch.Tensor]
    mid: torch.Tensor


@dataclass
class EncoderFeatures:
    hidden: torch.Tensor
    skips: list[torch.Tensor] = field(default_factory=list)
    embedding: torch.Tensor | None = None


class DenoiserEncoder(nn.Module):
    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        embedding_dim = config.time_embedding_dim * 2
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embedding_dim, embedding_dim),
            nn.SiLU(),
            nn.Linear(embedding_dim, embedding_dim),
        )
        self.conv_in = nn.Conv3d(config.latent_channels, config.width(0), 3, padding=1)
        self.levels = nn.ModuleList()
        for level in range(config.num_levels):
            width = config.width(level)
            modules = nn.ModuleDict({"block": ResBlock3d(width, width, embedding_dim)})
            if level in config.attention_levels:
                modules["attention"] = AttentionBlock3d(width)
            if level < config.num_levels - 1:
                modules["down"] = Downsample3d(width, config.width(level + 1))
            self.levels.append(modules)
        top = config.width(config.num_levels - 1)
        self.mid = ResBlock3d(top, top, embedding_dim)

    def forward(
        self,
        z: torch.Tensor,
        timesteps: torch.Tensor,
        condition: torch.Tensor | None = None,
    ) -> EncoderFeatures:
        embedding = sinusoidal_embedding(timesteps, self.config.time_embedding_dim).to(z.dtype)
        embedding = self.time_mlp(embedding)
        h = self.conv_in(z)
        if condition is not None:
            h = h + condition
        skips = []
        for modules in self.levels:
            h = modules["block"](h, embedding)
            if "attention" in modules:
                h = modules["attention"](h)
            skips.append(h)
            if "down" in modules:
                h = modules["down"](h)
        return EncoderFeatures(self.mid(h, embedding), skips, embedding)


class DenoiserDecoder(nn.Module):
    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        embedding_dim = config.time_embedding_dim * 2
        self.levels = nn.ModuleList()
        for level in reversed(range(config.num_levels)):
            width = config.width(level)
            modules = nn.ModuleDict({"block": ResBlock3d(2 * width, width, embedding_dim)})
            if level in config.attention_levels:
                modules["attention"] = AttentionBlock3d(width)
            if level > 0:
                modules["up"] = Upsample3d(width, config.width(level - 1))
            self.levels.append(modules)
        self.out = nn.Sequential(
            group_norm(config.width(0)),
            nn.SiLU(),
            nn.Conv3d(config.width(0), config.latent_channels, 3, padding=1),
        )

    def forward(self, h: torch.Tensor, skips: list[torch.Tensor], embedding: torch.Tensor) -> torch.Tensor:
        for modules, skip in zip(self.levels, reversed(skips)):
            h = modules["block"](torch.cat([h, skip], dim=1), embedding)
            if "attention" in modules:
                h = modules["attention"](h)
            if "up" in modules:
                h = modules["up"](h)
        return self.out(h)


class Denoiser(nn.Module):
    """Latent U-Net predicting the noise injected at timestep t."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        self.encoder = DenoiserEncoder(config)
        self.decoder = DenoiserDecoder(config)

    def forward(
        self,
        z: torch.Tensor,
        t: int | torch.Tensor,
        residuals: ControlResiduals | None = None,
    ) -> torch.Tensor:
        if z.ndim != 5 or z.shape[1] != self.config.latent_channels:
            raise ShapeMismatchError(
                f"expected (B, {self.config.latent_channels}, h, w, d) latents, got {tuple(z.shape)}"
            )
        features = self.encoder(z, as_timesteps(t, z.shape[0]))
        hidden, skips = features.hidden, features.skips
        if residuals is not None:
            if len(residuals.skips) != len(skips):
                raise ShapeMismatchError(
                    f"{len(residuals.skips)} control residuals for {len(skips)} denoiser levels"
                )
            skips = [skip + residual for skip, residual in zip(skips, residuals.skips)]
            hidden = hidden + residuals.mid
        return self.decoder(hidden, skips, features.embedding)


def diffusion_loss(
    model: NoisePredictor,
    z0: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    timesteps = as_timesteps(t, z0.shape[0])
    prediction = model(q_sample(z0, timesteps, noise, schedule), timesteps)
    loss = F.mse_loss(prediction, noise)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("diffusion loss is not finite", components={"loss": float(loss)})
    return loss


def ddpm_step(
    model: NoisePredictor,
    z_t: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | int,
    variance: Variance = "posterior",
) -> torch.Tensor:
    """One reverse step z_t -> z_{t-1}; t = 1 returns the mean without noise."""
    schedule.check(t)
    if not isinstance(generator, torch.Generator):
        generator = torch_generator(generator)
    epsilon = model(z_t, as_timesteps(t, z_t.shape[0]))
    beta, alpha, alpha_bar = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    mean = (z_t - (beta / math.sqrt(1.0 - alpha_bar)) * epsilon) / math.sqrt(alpha)
    if t == 1:
        return mean
    if variance == "posterior":
        sigma2 = beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - alpha_bar)
    else:
        sigma2 = beta
    noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return mean + math.sqrt(sigma2) * noise


def sample_latent(
    model: NoisePredictor,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    seed: int,
    variance: Variance = "posterior",
) -> torch.Tensor:
    """Ancestral sampling from pure noise at T down to z_0."""
    generator = torch_generator(seed)
    z = torch.randn(tuple(shape), generator=generator)
    with torch.no_grad():
        for t in range(schedule.num_timesteps, 0, -1):
            z = ddpm_step(model, z, t, schedule, generator, variance)
    return z


@dataclass
class LatentCodec:
    """Autoencoder plus the scale factor that brings its posterior means to unit variance."""

    autoencoder: Autoencoder
    scale_factor: float

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.autoencoder.encode(x).mean * self.scale_factor

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.autoencoder.decode(z / self.scale_factor)

    @classmethod
    def from_checkpoints(cls, vae: Checkpoint, diffusion: Checkpoint) -> "LatentCodec":
        if diffusion.references.get("vae") != vae.content_hash:
            raise LineageError(f"{diffusion.kind} was not trained on latents of this {vae.kind}")
        return cls(load_autoencoder(vae), float(diffusion.constants["scale_factor"]))


def latent_scale_factor(latents: torch.Tensor) -> float:
    std = float(latents.std())
    return 1.0 / std if std > 0 else 1.0


def train_diffusion(
    stage_config: DiffusionStageConfig,
    vae_checkpoint: Checkpoint,
    manifest: DatasetManifest,
    *,
    seed: int,
    split: str = "train",
) -> Checkpoint:
    autoencoder = load_autoencoder(vae_checkpoint)
    stage = autoencoder.config.stage
    settings = stage_config.optimizer
    pairs = load_pairs(manifest, split)
    inputs = pairs.inputs(stage, autoencoder.config.in_channels)
    latents = encode_in_chunks(lambda x: autoencoder.encode(x).mean, inputs, settings.batch_size)
    scale = latent_scale_factor(latents)
    latents = latents * scale
    schedule_config = stage_config.schedule
    schedule = build_schedule(
        schedule_config.num_timesteps, schedule_config.beta_start, schedule_config.beta_end, schedule_config.kind
    )
    logger.info(
        "Training %s denoiser on %d latents of shape %s (scale %.4f)",
        stage, len(latents), tuple(latents.shape[1:]), scale,
    )

    torch.manual_seed(seed)
    model = Denoiser(stage_config.model)
    generator = torch_generator(seed)

    def batch_loss(indices: torch.Tensor, generator: torch.Generator) -> dict[str, torch.Tensor]:
        z0 = latents[indices]
        t = sample_timesteps(len(indices), schedule.num_timesteps, generator)
        noise = torch.randn(z0.shape, generator=generator)
        return {"loss": diffusion_loss(model, z0, t, noise, schedule)}

    history = fit(f"diffusion_{stage}", model.parameters(), settings, len(latents), batch_loss, generator)
    return Checkpoint(
        kind=f"diffusion_{stage}",
        config={
            "model": stage_config.model.model_dump(mode="json"),
            "schedule": schedule_config.model_dump(mode="json"),
        },
        weights={"denoiser": state_dict_copy(model)},
        history=history,
        constants={
            "seed": seed,
            "scale_factor": scale,
            "latent_shape": list(latents.shape[1:]),
            "betas": schedule.betas.tolist(),
        },
        references={"vae": vae_checkpoint.content_hash},
    )


def load_denoiser(checkpoint: Checkpoint) -> Denoiser:
    if not checkpoint.kind.startswith("diffusion_"):
        checkpoint.require_kind("diffusion_image")
    model = Denoiser(DenoiserConfig.model_validate(checkpoint.config["model"]))
    model.load_state_dict(checkpoint.weights["denoiser"])
    model.eval()
    model.requires_grad_(False)
    return model


def schedule_from_checkpoint(checkpoint: Checkpoint) -> NoiseSchedule:
    return NoiseSchedule.from_betas(checkpoint.constants["betas"])
