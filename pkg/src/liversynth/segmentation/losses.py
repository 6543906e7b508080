"""Soft Dice and clamped cross-entropy losses on per-class probabilities."""
from __future__ import annotations

from typing import Literal
from typing import Sequence

import torch
import torch.nn.functional as F

from ..config import DiceLossConfig
from ..config import LossMix
from ..core import ShapeMismatchError

CE_CLAMP = 1e-7

CrossEntropyMode = Literal["binary", "categorical"]


def soft_dice_loss(
    p: torch.Tensor,
    g: torch.Tensor,
    eps: float = 1e-6,
    dims: Sequence[int] | None = None,
) -> torch.Tensor:
    """1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps), reduced over `dims`."""
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction {tuple(p.shape)} vs target {tuple(g.shape)}")
    dims = tuple(range(p.ndim)) if dims is None else tuple(dims)
    intersection = (p * g).sum(dim=dims)
    total = p.sum(dim=dims) + g.sum(dim=dims)
    return 1.0 - (2.0 * intersection + eps) / (total + eps)


def _check_target(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.ndim != g.ndim + 1 or p.shape[0] != g.shape[0] or p.shape[2:] != g.shape[1:]:
        raise ShapeMismatchError(
            f"probabilities {tuple(p.shape)} do not match labels {tuple(g.shape)}"
        )
    if g.numel() and (int(g.min()) < 0 or int(g.max()) >= p.shape[1]):
        raise ShapeMismatchError(f"label values outside [0, {p.shape[1]})")


def one_hot_target(g: torch.Tensor, num_classes: int, dtype: torch.dtype) -> torch.Tensor:
    return F.one_hot(g.long(), num_classes).movedim(-1, 1).to(dtype)


def dice_loss(p: torch.Tensor, g: torch.Tensor, config: DiceLossConfig | None = None) -> torch.Tensor:
    """Per-class soft Dice over the batch for p (B, C, ...) and integer labels g (B, ...)."""
    config = config or DiceLossConfig()
    _check_target(p, g)
    target = one_hot_target(g, p.shape[1], p.dtype)
    dims = (0, *range(2, p.ndim))
    per_class = soft_dice_loss(p, target, config.smoothing_epsilon, dims)
    if config.reduction == "foreground_only" and per_class.numel() > 1:
        per_class = per_class[1:]
    return per_class.mean()


def cross_entropy_loss(p: torch.Tensor, g: torch.Tensor, mode: CrossEntropyMode) -> torch.Tensor:
    """Cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    _check_target(p, g)
    num_classes = p.shape[1]
    if mode == "binary" and num_classes != 2:
        raise ValueError(f"binary cross-entropy needs 2 classes, got {num_classes}")
    if mode == "categorical" and num_classes < 3:
        raise ValueError(f"categorical cross-entropy needs more than 2 classes, got {num_classes}")
    clamped = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    if mode == "binary":
        foreground = clamped[:, 1]
        target = (g == 1).to(p.dtype)
        return -(target * foreground.log() + (1.0 - target) * (1.0 - foreground).log()).mean()
    return -clamped.gather(1, g.long().unsqueeze(1)).log().mean()


def segmentation_loss(
    p: torch.Tensor,
    g: torch.Tensor,
    mode: CrossEntropyMode,
    mix: LossMix,
    dice: DiceLossConfig,
) -> dict[str, torch.Tensor]:
    dice_term = dice_loss(p, g, dice)
    ce_term = cross_entropy_loss(p, g, mode)
    return {
        "loss": mix.dice_weight * dice_term + mix.ce_weight * ce_term,
        "dice": dice_term,
        "ce": ce_term,
    }
