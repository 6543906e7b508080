"""Content-addressed model checkpoints."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any

import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint is corrupt or of the wrong kind."""


class LineageError(CheckpointError):
    """Raised when checkpoints that reference each other do not match."""


def state_dict_copy(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: tensor.detach().cpu().clone() for name, tensor in module.state_dict().items()}


def _update_with_tensors(hasher: "hashlib._Hash", tensors: dict[str, torch.Tensor]) -> None:
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        hasher.update(name.encode("utf-8"))
        hasher.update(f"{tensor.dtype}:{tuple(tensor.shape)}".encode("utf-8"))
        hasher.update(tensor.numpy().tobytes())


def module_hash(module: nn.Module) -> str:
    hasher = hashlib.sha256()
    _update_with_tensors(hasher, module.state_dict())
    return hasher.hexdigest()


@dataclass(eq=False)
class Checkpoint:
    """Named weight blobs plus the configuration and constants needed to rebuild a model."""

    kind: str
    config: dict[str, Any]
    weights: dict[str, dict[str, torch.Tensor]]
    history: list[dict[str, float]] = field(default_factory=list)
    constants: dict[str, Any] = field(default_factory=dict)
    references: dict[str, str] = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        hasher = hashlib.sha256()
        meta = {
            "kind": self.kind,
            "config": self.config,
            "constants": self.constants,
            "references": self.references,
        }
        hasher.update(json.dumps(meta, sort_keys=True).encode("utf-8"))
        for blob in sorted(self.weights):
            hasher.update(blob.encode("utf-8"))
            _update_with_tensors(hasher, self.weights[blob])
        return hasher.hexdigest()

    def require_kind(self, kind: str) -> None:
        if self.kind != kind:
            raise CheckpointError(f"expected a {kind} checkpoint, got {self.kind}")


def save_checkpoint(checkpoint: Checkpoint, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digest = checkpoint.content_hash
    path = directory / f"{checkpoint.kind}-{digest[:16]}.pt"
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": checkpoint.kind,
        "config": checkpoint.config,
        "weights": checkpoint.weights,
        "history": checkpoint.history,
        "constants": checkpoint.constants,
        "references": checkpoint.references,
        "content_hash": digest,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path, kind: str | None = None, expected_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format in {path}")
    checkpoint = Checkpoint(
        kind=payload["kind"],
        config=payload["config"],
        weights=payload["weights"],
        history=payload["history"],
        constants=payload["constants"],
        references=payload["references"],
    )
    digest = checkpoint.content_hash
    if digest != payload["content_hash"]:
        raise CheckpointError(f"content hash mismatch for {path}")
    if expected_hash is not None and digest != expected_hash:
        raise LineageError(f"{path} has hash {digest[:16]}, expected {expected_hash[:16]}")
    if kind is not None:
        checkpoint.require_kind(kind)
    return checkpoint
