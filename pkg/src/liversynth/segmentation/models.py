"""3D U-Net zoo: unet, resunet, wideresunet, dynunet and vnet."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable
from typing import Literal
from typing import Sequence

import torch
from torch import nn

from ..checkpoint import Checkpoint
from ..config import SegmenterConfig
from ..core import LabelMap
from ..core import ShapeMismatchError
from ..core import Volume
from ..core import argmax_decode
from ..core import check_divisible

BlockFactory = Callable[[int, int, str], nn.Module]
Downsampling = Literal["pool", "stride"]

DYNUNET_MIN_EXTENT = 8
DYNUNET_MAX_LEVELS = 6


def _activation(kind: str, channels: int) -> nn.Module:
    return nn.PReLU(channels) if kind == "prelu" else nn.ReLU()


def _conv_norm_act(in_channels: int, out_channels: int, activation: str) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_channels, out_channels, 3, padding=1),
        nn.InstanceNorm3d(out_channels, affine=True),
        _activation(activation, out_channels),
    )


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, activation: str) -> None:
        super().__init__()
        self.body = nn.Sequential(
            _conv_norm_act(in_channels, out_channels, activation),
            _conv_norm_act(out_channels, out_channels, activation),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, activation: str) -> None:
        super().__init__()
        self.body = nn.Sequential(
            _conv_norm_act(in_channels, out_channels, activation),
            nn.Conv3d(out_channels, out_channels, 3, padding=1),
            nn.InstanceNorm3d(out_channels, affine=True),
        )
        self.shortcut = (
            nn.Conv3d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )
        self.act = _activation(activation, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.body(x) + self.shortcut(x))


class VNetStage(nn.Module):
    """Stack of 5x5x5 convolutions with a residual connection around the stack."""

    def __init__(self, in_channels: int, out_channels: int, activation: str, depth: int = 2) -> None:
        super().__init__()
        layers: list[nn.Module] = []
        for index in range(depth):
            layers += [
                nn.Conv3d(in_channels if index == 0 else out_channels, out_channels, 5, padding=2),
                nn.InstanceNorm3d(out_channels, affine=True),
            ]
            if index < depth - 1:
                layers.append(_activation(activation, out_channels))
        self.body = nn.Sequential(*layers)
        self.shortcut = (
            nn.Conv3d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )
        self.act = _activation(activation, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.body(x) + self.shortcut(x))


class Segmenter(nn.Module):
    """Encoder-decoder with skip concatenation; returns per-class logits."""

    def __init__(
        self,
        config: SegmenterConfig,
        num_levels: int,
        block: BlockFactory,
        downsampling: Downsampling,
    ) -> None:
        super().__init__()
        self.config = config
        self.num_levels = num_levels
        widths = [config.base_width * 2**level for level in range(num_levels)]
        activation = config.activation

        self.down = nn.ModuleList()
        self.encoder = nn.ModuleList([block(config.in_channels, widths[0], activation)])
        for level in range(1, num_levels):
            if downsampling == "pool":
                self.down.append(nn.MaxPool3d(2))
                self.encoder.append(block(widths[level - 1], widths[level], activation))
            else:
                self.down.append(
                    nn.Sequential(
                        nn.Conv3d(widths[level - 1], widths[level], 2, stride=2),
                        nn.InstanceNorm3d(widths[level], affine=True),
                        _activation(activation, widths[level]),
                    )
                )
                self.encoder.append(block(widths[level], widths[level], activation))

        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(1, num_levels)):
            self.up.append(nn.ConvTranspose3d(widths[level], widths[level - 1], 2, stride=2))
            self.decoder.append(block(2 * widths[level - 1], widths[level - 1], activation))
        self.head = nn.Conv3d(widths[0], config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError(f"expected (B, {self.config.in_channels}, H, W, D), got {tuple(x.shape)}")
        check_divisible(x.shape[2:], 2 ** (self.num_levels - 1))
        h = self.encoder[0](x)
        skips = [h]
        for down, block in zip(self.down, self.encoder[1:]):
            h = block(down(h))
            skips.append(h)
        for up, block, skip in zip(self.up, self.decoder, reversed(skips[:-1])):
            h = block(torch.cat([up(h), skip], dim=1))
        return self.head(h)


def dynunet_levels(spatial_shape: Sequence[int]) -> int:
    """Halve while every axis is even and the smallest stays >= 8."""
    dims = [int(n) for n in spatial_shape]
    levels = 1
    while levels < DYNUNET_MAX_LEVELS and min(dims) >= DYNUNET_MIN_EXTENT and all(n % 2 == 0 for n in dims):
        dims = [n // 2 for n in dims]
        levels += 1
    return levels


_VARIANTS: dict[str, tuple[BlockFactory, Downsampling]] = {
    "unet": (ConvBlock, "pool"),
    "resunet": (ResidualBlock, "pool"),
    "wideresunet": (ResidualBlock, "pool"),
    "dynunet": (ResidualBlock, "stride"),
    "vnet": (VNetStage, "stride"),
}


def build_segmenter(config: SegmenterConfig, spatial_shape: Sequence[int]) -> Segmenter:
    if config.variant == "dynunet":
        num_levels = dynunet_levels(spatial_shape)
    else:
        num_levels = config.num_levels
    check_divisible(spatial_shape, 2 ** (num_levels - 1))
    block, downsampling = _VARIANTS[config.variant]
    return Segmenter(config, num_levels, block, downsampling)


@dataclass(frozen=True)
class PredictionVolume:
    """Per-class probabilities (B, C, H, W, D) that sum to one over C."""

    probabilities: torch.Tensor

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "PredictionVolume":
        return cls(torch.softmax(logits, dim=1))

    @property
    def num_classes(self) -> int:
        return int(self.probabilities.shape[1])


def predict_probabilities(model: Segmenter, volumes: torch.Tensor, batch_size: int = 2) -> PredictionVolume:
    model.eval()
    with torch.no_grad():
        logits = torch.cat([model(part) for part in volumes.split(batch_size)])
    return PredictionVolume.from_logits(logits)


def predict_mask(model: Segmenter, v: Volume) -> LabelMap:
    prediction = predict_probabilities(model, v.to_tensor().unsqueeze(0))
    return argmax_decode(prediction.probabilities[0])


def load_segmenter(checkpoint: Checkpoint) -> Segmenter:
    checkpoint.require_kind("segmenter")
    model = build_segmenter(
        SegmenterConfig.model_validate(checkpoint.config["segmenter"]),
        checkpoint.config["input_shape"],
    )
    model.load_state_dict(checkpoint.weights["segmenter"])
    model.eval()
    return model
