"""Training plumbing shared by the autoencoder, diffusion and control stages."""
from __future__ import annotations

import logging
import math
from typing import Callable
from typing import Iterable

import torch
from torch import nn

from .config import OptimizerSettings

logger = logging.getLogger(__name__)

BatchLoss = Callable[[torch.Tensor, torch.Generator], dict[str, torch.Tensor]]


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss turns NaN or infinite; carries the training position."""

    def __init__(
        self,
        message: str,
        *,
        stage: str | None = None,
        epoch: int | None = None,
        batch: int | None = None,
        components: dict[str, float] | None = None,
    ) -> None:
        self.stage = stage
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components or {})
        where = ", ".join(
            f"{key}={value}" for key, value in (("stage", stage), ("epoch", epoch), ("batch", batch)) if value is not None
        )
        detail = f" ({where})" if where else ""
        losses = f" losses={self.components}" if self.components else ""
        super().__init__(f"{message}{detail}{losses}")


def ensure_finite(
    components: dict[str, torch.Tensor | float],
    *,
    stage: str | None = None,
    epoch: int | None = None,
    batch: int | None = None,
) -> None:
    values = {
        name: float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        for name, value in components.items()
    }
    if not all(math.isfinite(value) for value in values.values()):
        raise NonFiniteLossError(
            "non-finite loss", stage=stage, epoch=epoch, batch=batch, components=values
        )


def build_optimizer(parameters: Iterable[nn.Parameter], settings: OptimizerSettings) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        parameters,
        lr=settings.learning_rate,
        betas=settings.betas,
        weight_decay=settings.weight_decay,
    )


def epoch_batches(num_samples: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    order = torch.randperm(num_samples, generator=generator)
    return list(order.split(batch_size))


def encode_in_chunks(encode: Callable[[torch.Tensor], torch.Tensor], data: torch.Tensor, chunk: int) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([encode(part) for part in data.split(chunk)])


class EpochMeter:
    """Mean of per-batch loss components over one epoch."""

    def __init__(self) -> None:
        self._sums: dict[str, float] = {}
        self._batches = 0

    def update(self, components: dict[str, torch.Tensor]) -> None:
        for name, value in components.items():
            self._sums[name] = self._sums.get(name, 0.0) + float(value)
        self._batches += 1

    def means(self) -> dict[str, float]:
        return {name: total / max(self._batches, 1) for name, total in self._sums.items()}


def fit(
    stage: str,
    parameters: Iterable[nn.Parameter],
    settings: OptimizerSettings,
    num_samples: int,
    batch_loss: BatchLoss,
    generator: torch.Generator,
    on_epoch_end: Callable[[int], dict[str, float]] | None = None,
) -> list[dict[str, float]]:
    """Minimise `batch_loss(indices, generator)["loss"]` with AdamW; return per-epoch history."""
    if num_samples < 1:
        raise ValueError(f"{stage}: no training samples")
    optimizer = build_optimizer(parameters, settings)
    history: list[dict[str, float]] = []
    for epoch in range(1, settings.epochs + 1):
        meter = EpochMeter()
        for batch_index, indices in enumerate(epoch_batches(num_samples, settings.batch_size, generator)):
            components = batch_loss(indices, generator)
            ensure_finite(components, stage=stage, epoch=epoch, batch=batch_index)
            optimizer.zero_grad(set_to_none=True)
            components["loss"].backward()
            optimizer.step()
            meter.update({name: value.detach() for name, value in components.items()})
        record: dict[str, float] = {"epoch": epoch, **meter.means()}
        if on_epoch_end is not None:
            record.update(on_epoch_end(epoch))
        history.append(record)
        if epoch % settings.log_every == 0 or epoch == settings.epochs:
            logger.info("%s epoch %d/%d loss=%.6f", stage, epoch, settings.epochs, record["loss"])
    return history
