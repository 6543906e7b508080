"""Dataset manifests: paired (volume, label) records with provenance and split."""
from __future__ import annotations

import json
import os
from collections import Counter
from pathlib import Path
from typing import Iterable
from typing import Literal

from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError
from pydantic import model_validator

FORMAT_VERSION = 1

Provenance = Literal["phantom", "synthetic"]
Split = Literal["train", "val", "test"]
SPLITS: tuple[Split, ...] = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised for inconsistent or unreadable manifests."""


class ManifestRecord(BaseModel):
    id: str
    volume_path: str
    label_path: str
    provenance: Provenance
    split: Split
    seed: int | None = None
    flags: dict[str, bool] = Field(default_factory=dict)
    lineage: dict[str, str] = Field(default_factory=dict)

    def flagged(self, name: str) -> bool:
        return self.flags.get(name, False)


class DatasetManifest(BaseModel):
    """Declarative listing of paired records; paths are relative to `base_dir`."""

    format_version: int = FORMAT_VERSION
    records: list[ManifestRecord] = Field(default_factory=list)
    base_dir: Path | None = Field(default=None, exclude=True)

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        counts = Counter(record.id for record in self.records)
        duplicates = sorted(rid for rid, n in counts.items() if n > 1)
        if duplicates:
            raise ValueError(f"duplicate record ids: {duplicates}")
        if self.format_version != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format_version {self.format_version}")
        return self

    def resolve(self, relative: str) -> Path:
        base = self.base_dir or Path(".")
        return base / relative

    def select(
        self,
        split: Split | None = None,
        provenance: Provenance | None = None,
        exclude_flags: Iterable[str] = (),
    ) -> list[ManifestRecord]:
        excluded = tuple(exclude_flags)
        return [
            record
            for record in self.records
            if (split is None or record.split == split)
            and (provenance is None or record.provenance == provenance)
            and not any(record.flagged(name) for name in excluded)
        ]

    def split_counts(self) -> dict[str, int]:
        counts = Counter(record.split for record in self.records)
        return {split: counts.get(split, 0) for split in SPLITS}

    def provenance_counts(self) -> dict[str, int]:
        counts = Counter(record.provenance for record in self.records)
        return {name: counts.get(name, 0) for name in ("phantom", "synthetic")}

    def validate_files(self) -> None:
        for record in self.records:
            for relative in (record.volume_path, record.label_path):
                path = self.resolve(relative)
                if not path.is_file():
                    raise ManifestError(f"record {record.id} references missing file {path}")

    def rebased(self, base_dir: Path) -> "DatasetManifest":
        """Return a copy whose record paths are relative to `base_dir`."""
        base_dir = Path(base_dir)
        records = [
            record.model_copy(
                update={
                    "volume_path": _relative(self.resolve(record.volume_path), base_dir),
                    "label_path": _relative(self.resolve(record.label_path), base_dir),
                }
            )
            for record in self.records
        ]
        return DatasetManifest(records=records, base_dir=base_dir)


def _relative(path: Path, base_dir: Path) -> str:
    return Path(os.path.relpath(path.resolve(), base_dir.resolve())).as_posix()


def merge_manifests(first: DatasetManifest, second: DatasetManifest) -> DatasetManifest:
    base_dir = first.base_dir or Path(".")
    merged = list(first.rebased(base_dir).records) + list(second.rebased(base_dir).records)
    try:
        return DatasetManifest(records=merged, base_dir=base_dir)
    except ValidationError as exc:
        raise ManifestError(f"cannot merge manifests: {exc}") from exc


def dumps_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def save_manifest(manifest: DatasetManifest, path: Path) -> DatasetManifest:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    relocated = manifest.rebased(path.parent)
    path.write_text(dumps_manifest(relocated), encoding="utf-8")
    return relocated


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest.model_validate(raw)
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ManifestError(f"Invalid manifest at {path}: {exc}") from exc
    manifest.base_dir = path.parent
    return manifest
