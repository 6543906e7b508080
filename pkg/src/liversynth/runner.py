"""Resumable experiment pipeline: train both stages, synthesize, segment, report."""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any
from typing import Callable
from typing import Iterable

from .autoencoder import train_vae
from .checkpoint import Checkpoint
from .checkpoint import load_checkpoint
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .config import dump_config
from .controlnet import ModelCheckpoints
from .controlnet import train_controlnet
from .core import Volume
from .dataset import DEGENERATE_FLAG
from .dataset import load_record
from .diffusion import train_diffusion
from .manifest import DatasetManifest
from .manifest import load_manifest
from .manifest import merge_manifests
from .manifest import save_manifest
from .metrics import fid_report
from .phantom import generate_phantom_dataset
from .report import FID_METRICS
from .report import LINEAGE_METRICS
from .report import MIXING_METRICS
from .report import SEG_METRICS
from .report import build_report
from .report import write_json
from .segmentation.training import evaluate_segmenter
from .segmentation.training import train_segmenter
from .state import StageState
from .state import StageStatus
from .state import StateStore
from .synthesis import SynthesisModels
from .synthesis import reconstruct_volume
from .synthesis import sample_unconditional_volume
from .synthesis import synthesize_dataset
from .synthesis import verify_lineage

logger = logging.getLogger(__name__)

STAGES = (
    "phantom",
    "vae_label",
    "vae_image",
    "diff_label",
    "diff_image",
    "controlnet",
    "generate",
    "seg_real",
    "seg_mixed",
    "report",
)

DEPENDENCIES: dict[str, tuple[str, ...]] = {
    "phantom": (),
    "vae_label": ("phantom",),
    "vae_image": ("phantom",),
    "diff_label": ("vae_label",),
    "diff_image": ("vae_image",),
    "controlnet": ("vae_label", "vae_image", "diff_label", "diff_image"),
    "generate": ("controlnet",),
    "seg_real": ("phantom",),
    "seg_mixed": ("generate",),
    "report": ("generate", "seg_real", "seg_mixed"),
}

SEED_OFFSETS = {
    "vae_label": 1,
    "vae_image": 2,
    "diff_label": 3,
    "diff_image": 4,
    "controlnet": 5,
    "seg_real": 6,
    "seg_mixed": 6,
}

UNCONDITIONAL_SEED_OFFSET = 2**32


class StageDependencyError(RuntimeError):
    """Raised when a requested stage needs an artifact that does not exist."""


class StageFailedError(RuntimeError):
    """Wraps the exception that aborted a stage."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")


def resolve_stages(stages: Iterable[str] | None) -> list[str]:
    if stages is None:
        return list(STAGES)
    requested = set(stages)
    unknown = sorted(requested - set(STAGES))
    if unknown:
        raise ValueError(f"unknown stages {unknown}; choose from {', '.join(STAGES)}")
    return [stage for stage in STAGES if stage in requested]


def _digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


class PipelineRunner:
    def __init__(self, config: ExperimentConfig, state_store: StateStore) -> None:
        self.config = config
        self.state_store = state_store
        self.run_dir = config.run_dir()
        self.run = config.name
        self._handlers: dict[str, Callable[[], dict[str, Any]]] = {
            "phantom": self._phantom,
            "vae_label": lambda: self._vae("vae_label"),
            "vae_image": lambda: self._vae("vae_image"),
            "diff_label": lambda: self._diffusion("diff_label"),
            "diff_image": lambda: self._diffusion("diff_image"),
            "controlnet": self._controlnet,
            "generate": self._generate,
            "seg_real": lambda: self._segmentation(mixed=False),
            "seg_mixed": lambda: self._segmentation(mixed=True),
            "report": self._report,
        }

    # Paths and artifacts ----------------------------------------------
    @property
    def data_dir(self) -> Path:
        return self.run_dir / "data"

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    def _relative(self, path: Path) -> str:
        return path.relative_to(self.run_dir).as_posix()

    def _state(self, stage: str) -> StageState:
        return self.state_store.load_stage_state(self.run, stage)

    def _artifact(self, stage: str) -> dict[str, Any]:
        state = self._state(stage)
        if state.status != StageStatus.COMPLETED:
            raise StageDependencyError(f"stage {stage} has not completed (status {state.status.value})")
        return state.data or {}

    def checkpoint(self, stage: str) -> Checkpoint:
        artifact = self._artifact(stage)
        path = self.run_dir / artifact["checkpoint"]
        if not path.is_file():
            raise StageDependencyError(f"checkpoint of stage {stage} is missing: {path}")
        return load_checkpoint(path, expected_hash=artifact["hash"])

    def _save(self, checkpoint: Checkpoint) -> dict[str, Any]:
        path = save_checkpoint(checkpoint, self.checkpoint_dir)
        return {"checkpoint": self._relative(path), "hash": checkpoint.content_hash}

    def real_manifest(self) -> DatasetManifest:
        return load_manifest(self.run_dir / self._artifact("phantom")["manifest"])

    def synthetic_manifest(self) -> DatasetManifest:
        return load_manifest(self.run_dir / self._artifact("generate")["manifest"])

    def base_checkpoints(self) -> ModelCheckpoints:
        return ModelCheckpoints(
            label_vae=self.checkpoint("vae_label"),
            label_diffusion=self.checkpoint("diff_label"),
            image_vae=self.checkpoint("vae_image"),
            image_diffusion=self.checkpoint("diff_image"),
        )

    def lineage(self) -> dict[str, str]:
        """Hashes of the five checkpoints the synthetic pairs must come from."""
        return {**self.base_checkpoints().hashes(), "controlnet": self.checkpoint("controlnet").content_hash}

    # Fingerprints -----------------------------------------------------
    def _stage_settings(self, stage: str) -> Any:
        config = self.config
        sections = {
            "phantom": {"phantom": config.phantom, "data": config.data},
            "vae_label": config.label_vae,
            "vae_image": config.image_vae,
            "diff_label": config.label_diffusion,
            "diff_image": config.image_diffusion,
            "controlnet": config.controlnet,
            "generate": {"synthesis": config.synthesis, "metrics": config.metrics},
            "seg_real": config.segmentation,
            "seg_mixed": {"segmentation": config.segmentation, "synthesis": config.synthesis},
            "report": {},
        }
        section = sections[stage]
        if isinstance(section, dict):
            return {key: value.model_dump(mode="json") for key, value in section.items()}
        return section.model_dump(mode="json")

    def fingerprint(self, stage: str) -> str:
        upstream = {dep: self.fingerprint(dep) for dep in DEPENDENCIES[stage]}
        return _digest({"stage": stage, "seed": self.config.seed, "settings": self._stage_settings(stage), "upstream": upstream})

    def _is_current(self, stage: str) -> bool:
        state = self._state(stage)
        return state.status == StageStatus.COMPLETED and state.fingerprint == self.fingerprint(stage)

    # Orchestration ----------------------------------------------------
    def run_stages(self, stages: Iterable[str] | None = None) -> Path:
        ordered = resolve_stages(stages)
        requested = set(ordered)
        for stage in ordered:
            for dep in DEPENDENCIES[stage]:
                if dep not in requested and not self._is_current(dep):
                    raise StageDependencyError(
                        f"stage {stage} needs the artifacts of stage {dep}, which has not completed; "
                        f"run it first or request it together"
                    )
        self.run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.config, self.run_dir / "config.yaml")
        for stage in ordered:
            self._run_stage(stage)
        return self.run_dir

    def _run_stage(self, stage: str) -> None:
        fingerprint = self.fingerprint(stage)
        state = self._state(stage)
        if state.status == StageStatus.COMPLETED and state.fingerprint == fingerprint:
            logger.info("Skipping stage %s (up to date)", stage)
            return
        state.status = StageStatus.RUNNING
        state.fingerprint = fingerprint
        state.attempts += 1
        state.updated_at = None
        self.state_store.save_stage_state(state)
        logger.info("Running stage %s", stage)
        try:
            data = self._handlers[stage]()
        except Exception as exc:
            state.status = StageStatus.FAILED
            state.data = {"error": f"{type(exc).__name__}: {exc}"}
            self.state_store.save_stage_state(state)
            logger.error("Stage %s failed: %s", stage, exc)
            raise StageFailedError(stage, exc) from exc
        state.status = StageStatus.COMPLETED
        state.data = data
        self.state_store.save_stage_state(state)
        logger.info("Completed stage %s", stage)

    # Stages -----------------------------------------------------------
    def _phantom(self) -> dict[str, Any]:
        data = self.config.data
        manifest = generate_phantom_dataset(data.count, data.base_seed, self.config.phantom, data.splits, self.data_dir)
        path = self.data_dir / "manifest.json"
        save_manifest(manifest, path)
        return {"manifest": self._relative(path), "splits": manifest.split_counts()}

    def _vae(self, stage: str) -> dict[str, Any]:
        stage_config = self.config.label_vae if stage == "vae_label" else self.config.image_vae
        seed = self.config.stage_seed(stage_config.optimizer, SEED_OFFSETS[stage])
        return self._save(train_vae(stage_config, self.real_manifest(), seed=seed))

    def _diffusion(self, stage: str) -> dict[str, Any]:
        if stage == "diff_label":
            stage_config, vae = self.config.label_diffusion, self.checkpoint("vae_label")
        else:
            stage_config, vae = self.config.image_diffusion, self.checkpoint("vae_image")
        seed = self.config.stage_seed(stage_config.optimizer, SEED_OFFSETS[stage])
        return self._save(train_diffusion(stage_config, vae, self.real_manifest(), seed=seed))

    def _controlnet(self) -> dict[str, Any]:
        stage_config = self.config.controlnet
        seed = self.config.stage_seed(stage_config.optimizer, SEED_OFFSETS["controlnet"])
        checkpoint = train_controlnet(stage_config, self.base_checkpoints(), self.real_manifest(), seed=seed)
        return self._save(checkpoint)

    def _generate(self) -> dict[str, Any]:
        synthesis = self.config.synthesis
        spacing = self.config.phantom.spacing
        models = SynthesisModels.from_checkpoints(self.base_checkpoints(), self.checkpoint("controlnet"))
        real = self.real_manifest()
        train_records = real.select(split="train")
        count = synthesis.resolved_count(len(train_records))
        real_labels = None
        if synthesis.rerender_real_labels:
            real_labels = [load_record(real, record)[1] for record in train_records]
        synthetic = synthesize_dataset(
            count, synthesis.base_seed, models, self.data_dir, real_labels=real_labels, spacing=spacing
        )
        path = self.data_dir / "synthetic_manifest.json"
        save_manifest(synthetic, path)

        def volumes(manifest: DatasetManifest, split: str | None) -> list[Volume]:
            return [load_record(manifest, record)[0] for record in manifest.select(split=split)]

        reference = volumes(real, "train")
        holdout = volumes(real, "test")
        unconditional = [
            sample_unconditional_volume(models, synthesis.base_seed + index + UNCONDITIONAL_SEED_OFFSET, spacing)
            for index in range(count)
        ]
        reconstructions = [reconstruct_volume(models, volume) for volume in holdout]
        spec = self.config.metrics
        fid = {
            "two_stage": fid_report(reference, volumes(synthetic, None), spec).as_dict(),
            "unconditional_ldm": fid_report(reference, unconditional, spec).as_dict(),
            "vae_reconstruction": fid_report(reference, reconstructions, spec).as_dict(),
            "real_holdout": fid_report(reference, holdout, spec).as_dict(),
        }
        write_json(self.run_dir / FID_METRICS, fid)
        write_json(
            self.run_dir / LINEAGE_METRICS,
            {**models.lineage, "phantom_base_seed": self.config.data.base_seed, "synthesis_base_seed": synthesis.base_seed},
        )
        degenerate = sum(record.flagged(DEGENERATE_FLAG) for record in synthetic.records)
        return {"manifest": self._relative(path), "count": count, "degenerate": degenerate, "lineage": models.lineage}

    def _segmentation(self, mixed: bool) -> dict[str, Any]:
        seg = self.config.segmentation
        real = self.real_manifest()
        manifest = real
        include_degenerate = self.config.synthesis.include_degenerate
        if mixed:
            synthetic = self.synthetic_manifest()
            verify_lineage(synthetic, self.lineage())
            manifest = merge_manifests(real, synthetic)
            real_train = len(real.select(split="train"))
            excluded = () if include_degenerate else (DEGENERATE_FLAG,)
            used = len(synthetic.select(split="train", exclude_flags=excluded))
            write_json(
                self.run_dir / MIXING_METRICS,
                {
                    "real_train": real_train,
                    "synthetic_train": used,
                    "synthetic_generated": len(synthetic.records),
                    "degenerate_excluded": len(synthetic.records) - used,
                    "ratio": used / real_train if real_train else 0.0,
                    "sampling": "uniform",
                    "rerender_real_labels": self.config.synthesis.rerender_real_labels,
                },
            )
        seed = self.config.stage_seed(seg.optimizer, SEED_OFFSETS["seg_mixed" if mixed else "seg_real"])
        results: dict[str, Any] = {}
        for variant in seg.variants:
            for task in seg.tasks:
                result = train_segmenter(
                    seg.segmenter_config(variant, task),
                    manifest,
                    task,
                    seg.loss_mix,
                    seg.optimizer,
                    seed=seed,
                    patience=seg.patience,
                    dice=seg.dice,
                    include_degenerate=include_degenerate,
                )
                artifact = self._save(result.checkpoint)
                results[f"{variant}/{task}"] = {
                    **artifact,
                    "best_epoch": result.best_epoch,
                    "best_val_dice": result.best_val_dice,
                    "scores": evaluate_segmenter(result.checkpoint, real, split="test"),
                }
        key = "mixed" if mixed else "real"
        write_json(self.run_dir / SEG_METRICS[key], results)
        return {"metrics": SEG_METRICS[key], "models": sorted(results)}

    def _report(self) -> dict[str, Any]:
        build_report(self.run_dir)
        return {"report": "report.json"}


def run_pipeline(config: ExperimentConfig, stages: Iterable[str] | None = None) -> Path:
    """Run the requested stages in dependency order; completed, unchanged stages are skipped."""
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    store = StateStore(run_dir / "state.db")
    try:
        return PipelineRunner(config, store).run_stages(stages)
    finally:
        store.close()
