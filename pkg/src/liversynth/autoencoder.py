"""3D variational autoencoder for volumes and one-hot label maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint
from .checkpoint import state_dict_copy
from .config import AutoencoderConfig
from .config import VaeStageConfig
from .core import ShapeMismatchError
from .core import check_divisible
from .core import torch_generator
from .dataset import load_pairs
from .layers import Downsample3d
from .layers import ResBlock3d
from .layers import Upsample3d
from .layers import group_norm
from .manifest import DatasetManifest
from .training import NonFiniteLossError
from .training import fit

logger = logging.getLogger(__name__)

LOG_VARIANCE_MIN = -30.0
LOG_VARIANCE_MAX = 20.0


@dataclass(frozen=True)
class GaussianLatent:
    """Diagonal Gaussian posterior over the latent grid."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_variance.shape:
            raise ShapeMismatchError(
                f"mean {tuple(self.mean.shape)} and log-variance "
                f"{tuple(self.log_variance.shape)} differ"
            )


@dataclass(frozen=True)
class VaeLoss:
    total: torch.Tensor
    reconstruction: torch.Tensor
    kl: torch.Tensor

    def components(self) -> dict[str, torch.Tensor]:
        return {"loss": self.total, "reconstruction": self.reconstruction, "kl": self.kl}


class Autoencoder(nn.Module):
    def __init__(self, config: AutoencoderConfig) -> None:
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**level for level in range(config.num_levels + 1)]
        top = widths[-1]

        self.encoder_in = nn.Conv3d(config.in_channels, widths[0], 3, padding=1)
        down: list[nn.Module] = []
        for level in range(config.num_levels):
            down += [ResBlock3d(widths[level], widths[level]), Downsample3d(widths[level], widths[level + 1])]
        self.encoder_blocks = nn.Sequential(*down)
        self.encoder_mid = ResBlock3d(top, top)
        self.encoder_out = nn.Sequential(
            group_norm(top), nn.SiLU(), nn.Conv3d(top, 2 * config.latent_channels, 3, padding=1)
        )

        self.decoder_in = nn.Conv3d(config.latent_channels, top, 3, padding=1)
        self.decoder_mid = ResBlock3d(top, top)
        up: list[nn.Module] = []
        for level in reversed(range(config.num_levels)):
            up += [Upsample3d(widths[level + 1], widths[level]), ResBlock3d(widths[level], widths[level])]
        self.decoder_blocks = nn.Sequential(*up)
        self.decoder_out = nn.Sequential(
            group_norm(widths[0]), nn.SiLU(), nn.Conv3d(widths[0], config.in_channels, 3, padding=1)
        )

    def encode(self, x: torch.Tensor) -> GaussianLatent:
        """Accepts (B, C, H, W, D) or a single (C, H, W, D) sample."""
        batched = x.ndim == 5
        x = x if batched else x.unsqueeze(0)
        if x.ndim != 5:
            raise ShapeMismatchError(f"expected a (C, H, W, D) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(
                f"channel axis has {x.shape[1]} channels, expected {self.config.in_channels}"
            )
        check_divisible(x.shape[2:], self.config.downsample_factor)
        h = self.encoder_mid(self.encoder_blocks(self.encoder_in(x)))
        mean, log_variance = self.encoder_out(h).chunk(2, dim=1)
        log_variance = log_variance.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)
        if not batched:
            mean, log_variance = mean[0], log_variance[0]
        return GaussianLatent(mean, log_variance)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        batched = z.ndim == 5
        z = z if batched else z.unsqueeze(0)
        if z.ndim != 5 or z.shape[1] != self.config.latent_channels:
            raise ShapeMismatchError(
                f"expected a latent with {self.config.latent_channels} channels, got {tuple(z.shape)}"
            )
        out = self.decoder_out(self.decoder_blocks(self.decoder_mid(self.decoder_in(z))))
        if self.config.stage == "image":
            out = torch.sigmoid(out)
        return out if batched else out[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x).mean)


def reparameterize(g: GaussianLatent, seed: int | torch.Generator) -> torch.Tensor:
    generator = seed if isinstance(seed, torch.Generator) else torch_generator(seed)
    noise = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return g.mean + torch.exp(0.5 * g.log_variance) * noise


def kl_divergence(g: GaussianLatent) -> torch.Tensor:
    """Mean per-element KL to the standard normal."""
    kl = 0.5 * (g.mean.pow(2) + g.log_variance.exp() - 1.0 - g.log_variance).mean()
    if not torch.isfinite(kl):
        raise NonFiniteLossError("KL divergence is not finite", components={"kl": float(kl)})
    return kl


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(f"reconstruction {tuple(x_hat.shape)} does not match input {tuple(x.shape)}")
    if kind == "l1":
        return F.l1_loss(x_hat, x)
    return F.mse_loss(x_hat, x)


def vae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    g: GaussianLatent,
    kl_weight: float,
    kind: str = "mse",
) -> VaeLoss:
    reconstruction = reconstruction_loss(x, x_hat, kind)
    kl = kl_divergence(g)
    return VaeLoss(total=reconstruction + kl_weight * kl, reconstruction=reconstruction, kl=kl)


def evaluate_reconstruction(model: Autoencoder, data: torch.Tensor, batch_size: int) -> float:
    """Deterministic reconstruction error, decoding posterior means."""
    total = 0.0
    with torch.no_grad():
        for part in data.split(batch_size):
            total += float(reconstruction_loss(part, model(part), model.config.reconstruction)) * len(part)
    return total / len(data)


def fit_autoencoder(stage_config: VaeStageConfig, data: torch.Tensor, seed: int) -> Checkpoint:
    config = stage_config.model
    settings = stage_config.optimizer
    torch.manual_seed(seed)
    model = Autoencoder(config)
    generator = torch_generator(seed)

    def batch_loss(indices: torch.Tensor, generator: torch.Generator) -> dict[str, torch.Tensor]:
        batch = data[indices]
        posterior = model.encode(batch)
        x_hat = model.decode(reparameterize(posterior, generator))
        return vae_loss(batch, x_hat, posterior, config.kl_weight, config.reconstruction).components()

    initial = evaluate_reconstruction(model, data, settings.batch_size)
    history = fit(
        f"vae_{config.stage}",
        model.parameters(),
        settings,
        len(data),
        batch_loss,
        generator,
        on_epoch_end=lambda epoch: {
            "eval_reconstruction": evaluate_reconstruction(model, data, settings.batch_size)
        },
    )
    return Checkpoint(
        kind=f"vae_{config.stage}",
        config=config.model_dump(mode="json"),
        weights={"autoencoder": state_dict_copy(model)},
        history=history,
        constants={"seed": seed, "initial_eval_reconstruction": initial},
    )


def train_vae(
    stage_config: VaeStageConfig,
    manifest: DatasetManifest,
    *,
    seed: int,
    split: str = "train",
) -> Checkpoint:
    pairs = load_pairs(manifest, split)
    data = pairs.inputs(stage_config.model.stage, stage_config.model.in_channels)
    logger.info("Training %s autoencoder on %d records", stage_config.model.stage, len(pairs))
    return fit_autoencoder(stage_config, data, seed)


def load_autoencoder(checkpoint: Checkpoint) -> Autoencoder:
    if not checkpoint.kind.startswith("vae_"):
        checkpoint.require_kind("vae_image")
    model = Autoencoder(AutoencoderConfig.model_validate(checkpoint.config))
    model.load_state_dict(checkpoint.weights["autoencoder"])
    model.eval()
    model.requires_grad_(False)
    return model
