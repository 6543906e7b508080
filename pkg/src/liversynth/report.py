"""Experiment report: generative FID table and real vs real+synthetic Dice table."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
DICE_REDUCTION = "mean over foreground classes"
FID_ROWS = ("two_stage", "unconditional_ldm", "vae_reconstruction", "real_holdout")

FID_METRICS = "metrics/fid.json"
SEG_METRICS = {"real": "metrics/seg_real.json", "mixed": "metrics/seg_mixed.json"}
MIXING_METRICS = "metrics/mixing.json"
LINEAGE_METRICS = "metrics/lineage.json"


class ReportError(RuntimeError):
    """Raised when metrics needed for the report are missing or malformed."""


class FidRow(BaseModel):
    model: str
    axial: float
    sagittal: float
    coronal: float
    average: float


class DiceRow(BaseModel):
    variant: str
    task: str
    real: float
    mixed: float
    improvement_percent: float
    delta_points: float
    improvement: str
    per_class_real: dict[str, float] = Field(default_factory=dict)
    per_class_mixed: dict[str, float] = Field(default_factory=dict)


class MixingInfo(BaseModel):
    real_train: int
    synthetic_train: int
    synthetic_generated: int
    degenerate_excluded: int
    ratio: float
    sampling: str = "uniform"
    rerender_real_labels: bool = False


class ReportDocument(BaseModel):
    format_version: int = REPORT_VERSION
    run: str
    fid_reference: str = "real train volumes"
    dice_reduction: str = DICE_REDUCTION
    dice_split: str = "test"
    fid: list[FidRow]
    segmentation: list[DiceRow]
    overall: list[DiceRow]
    mixing: MixingInfo
    lineage: dict[str, Any] = Field(default_factory=dict)


def write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path: Path) -> Any:
    if not path.is_file():
        raise ReportError(f"missing metrics file {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def improvement_percent(real: float, mixed: float) -> float:
    """Relative change of the mixed-data score over the real-only score, in percent."""
    if real == 0:
        return (mixed - real) * 100.0
    return (mixed - real) / real * 100.0


def format_improvement(value: float) -> str:
    return f"{value:+.2f}%"


def dice_row(variant: str, task: str, real: dict[str, float], mixed: dict[str, float]) -> DiceRow:
    change = improvement_percent(real["mean_dice"], mixed["mean_dice"])
    return DiceRow(
        variant=variant,
        task=task,
        real=real["mean_dice"],
        mixed=mixed["mean_dice"],
        improvement_percent=change,
        delta_points=(mixed["mean_dice"] - real["mean_dice"]) * 100.0,
        improvement=format_improvement(change),
        per_class_real={k: v for k, v in real.items() if k.startswith("class_")},
        per_class_mixed={k: v for k, v in mixed.items() if k.startswith("class_")},
    )


def _scores(entries: dict[str, Any], key: str, source: str) -> dict[str, float]:
    try:
        return entries[key]["scores"]
    except KeyError as exc:
        raise ReportError(f"{source} has no scores for {key}") from exc


def build_report(run_dir: Path) -> ReportDocument:
    """Assemble the report from the run's metrics and write JSON, schema and markdown."""
    run_dir = Path(run_dir)
    fid = read_json(run_dir / FID_METRICS)
    real = read_json(run_dir / SEG_METRICS["real"])
    mixed = read_json(run_dir / SEG_METRICS["mixed"])
    mixing = read_json(run_dir / MIXING_METRICS)
    lineage = read_json(run_dir / LINEAGE_METRICS) if (run_dir / LINEAGE_METRICS).is_file() else {}

    missing = [name for name in FID_ROWS if name not in fid]
    if missing:
        raise ReportError(f"FID metrics lack rows {missing}")
    if set(real) != set(mixed):
        raise ReportError(
            f"real and mixed segmentation runs differ: {sorted(set(real) ^ set(mixed))}"
        )

    rows = []
    for key in sorted(real):
        variant, task = key.split("/")
        rows.append(dice_row(variant, task, _scores(real, key, "seg_real"), _scores(mixed, key, "seg_mixed")))
    overall = []
    for task in sorted({row.task for row in rows}):
        task_rows = [row for row in rows if row.task == task]
        mean_real = sum(row.real for row in task_rows) / len(task_rows)
        mean_mixed = sum(row.mixed for row in task_rows) / len(task_rows)
        overall.append(dice_row("overall", task, {"mean_dice": mean_real}, {"mean_dice": mean_mixed}))

    try:
        document = ReportDocument(
            run=run_dir.name,
            fid=[FidRow(model=name, **fid[name]) for name in FID_ROWS],
            segmentation=rows,
            overall=overall,
            mixing=MixingInfo.model_validate(mixing),
            lineage=lineage,
        )
    except ValidationError as exc:
        raise ReportError(f"malformed metrics under {run_dir}: {exc}") from exc

    write_json(run_dir / "report.json", document.model_dump(mode="json"))
    write_json(run_dir / "report.schema.json", ReportDocument.model_json_schema())
    (run_dir / "report.md").write_text(render_markdown(document), encoding="utf-8")
    logger.info("Report written to %s", run_dir / "report.json")
    return document


def render_markdown(document: ReportDocument) -> str:
    lines = [
        f"# Report: {document.run}",
        "",
        f"## Generative model comparison (FID vs {document.fid_reference})",
        "",
        "| Model | Axial | Sagittal | Coronal | Average |",
        "|---|---|---|---|---|",
    ]
    for row in document.fid:
        lines.append(f"| {row.model} | {row.axial:.4f} | {row.sagittal:.4f} | {row.coronal:.4f} | {row.average:.4f} |")
    lines += [
        "",
        f"## Segmentation (Dice, {document.dice_reduction}, {document.dice_split} split)",
        "",
        "| Model | Task | Real | Real + Synthetic | Improvement |",
        "|---|---|---|---|---|",
    ]
    for row in document.segmentation:
        lines.append(f"| {row.variant} | {row.task} | {row.real:.4f} | {row.mixed:.4f} | {row.improvement} |")
    for row in document.overall:
        lines.append(f"| Overall Mean Dice | {row.task} | {row.real:.4f} | {row.mixed:.4f} | {row.improvement} |")
    mixing = document.mixing
    lines += [
        "",
        "## Data mixing",
        "",
        f"- real train volumes: {mixing.real_train}",
        f"- synthetic train volumes: {mixing.synthetic_train} of {mixing.synthetic_generated} generated "
        f"({mixing.degenerate_excluded} without liver excluded)",
        f"- synthetic:real ratio {mixing.ratio:g}, {mixing.sampling} sampling",
        f"- real labels re-rendered: {'yes' if mixing.rerender_real_labels else 'no'}",
        "",
    ]
    return "\n".join(lines)
