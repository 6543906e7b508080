import json

import pytest

from liversynth.report import FID_ROWS
from liversynth.report import ReportError
from liversynth.report import build_report
from liversynth.report import format_improvement
from liversynth.report import improvement_percent
from liversynth.report import write_json

MIXING = {
    "real_train": 4,
    "synthetic_train": 3,
    "synthetic_generated": 4,
    "degenerate_excluded": 1,
    "ratio": 0.75,
}


def _fid(value: float) -> dict:
    return {"axial": value, "sagittal": value, "coronal": value, "average": value}


def _seg(scores: dict[str, float]) -> dict:
    return {key: {"scores": {"mean_dice": value, "class_1": value}} for key, value in scores.items()}


def _write_metrics(run_dir, real=None, mixed=None):
    write_json(run_dir / "metrics" / "fid.json", {name: _fid(i + 1.0) for i, name in enumerate(FID_ROWS)})
    write_json(run_dir / "metrics" / "seg_real.json", _seg(real or {"unet/liver_only": 0.5, "vnet/liver_only": 0.7}))
    write_json(run_dir / "metrics" / "seg_mixed.json", _seg(mixed or {"unet/liver_only": 0.55, "vnet/liver_only": 0.7}))
    write_json(run_dir / "metrics" / "mixing.json", MIXING)


def test_improvement_is_relative_percent():
    assert improvement_percent(0.5, 0.55) == pytest.approx(10.0)
    assert format_improvement(improvement_percent(0.9, 0.906)) == "+0.67%"
    assert format_improvement(-1.234) == "-1.23%"
    assert improvement_percent(0.0, 0.1) == pytest.approx(10.0)


def test_report_tables(tmp_path):
    _write_metrics(tmp_path)
    document = build_report(tmp_path)
    assert [row.model for row in document.fid] == list(FID_ROWS)
    unet = document.segmentation[0]
    assert (unet.variant, unet.task, unet.improvement) == ("unet", "liver_only", "+10.00%")
    assert unet.delta_points == pytest.approx(5.0)
    assert unet.per_class_mixed == {"class_1": 0.55}
    overall = document.overall[0]
    assert overall.real == pytest.approx(0.6)
    assert overall.mixed == pytest.approx(0.625)
    assert document.mixing.sampling == "uniform"

    saved = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert saved["dice_reduction"] == "mean over foreground classes"
    assert (tmp_path / "report.schema.json").is_file()
    markdown = (tmp_path / "report.md").read_text(encoding="utf-8")
    assert "| Overall Mean Dice | liver_only | 0.6000 | 0.6250 | +4.17% |" in markdown
    assert "1 without liver excluded" in markdown


def test_missing_metrics_file(tmp_path):
    with pytest.raises(ReportError, match="missing metrics file"):
        build_report(tmp_path)


def test_real_and_mixed_runs_must_match(tmp_path):
    _write_metrics(tmp_path, mixed={"unet/liver_only": 0.6})
    with pytest.raises(ReportError, match="vnet/liver_only"):
        build_report(tmp_path)


def test_missing_fid_row(tmp_path):
    _write_metrics(tmp_path)
    write_json(tmp_path / "metrics" / "fid.json", {"two_stage": _fid(1.0)})
    with pytest.raises(ReportError, match="unconditional_ldm"):
        build_report(tmp_path)


def test_equal_dice_reports_zero_improvement():
    assert format_improvement(improvement_percent(0.8, 0.8)) == "+0.00%"
