"""CLI entry point for liversynth."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .config import load_experiment_config
from .dataset import load_record
from .manifest import load_manifest
from .manifest import save_manifest
from .metrics import fid_report
from .phantom import generate_phantom_dataset
from .report import build_report
from .runner import STAGES
from .runner import run_pipeline
from .segmentation.training import evaluate_segmenter

TRAIN_STAGES = {
    ("vae", "label"): "vae_label",
    ("vae", "image"): "vae_image",
    ("diffusion", "label"): "diff_label",
    ("diffusion", "image"): "diff_image",
    ("controlnet", None): "controlnet",
    ("seg", "real"): "seg_real",
    ("seg", "mixed"): "seg_mixed",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="two-stage latent diffusion for paired liver volumes")
    parser.add_argument("--log-level", type=str, default=os.getenv("LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=Path, required=True, help="Path to experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="Override the experiment seed")
        return p

    phantom = with_config(sub.add_parser("phantom", help="Generate the phantom dataset"))
    phantom.add_argument("--base-seed", type=int, default=None, help="Override data.base_seed")
    phantom.add_argument(
        "--out",
        type=Path,
        default=None,
        help="Write the dataset here instead of running the phantom stage of the run",
    )

    train = with_config(sub.add_parser("train", help="Train one model stage"))
    train.add_argument("model", choices=["vae", "diffusion", "controlnet", "seg"])
    train.add_argument("--stage", type=str, default=None, help="label|image for vae/diffusion, real|mixed for seg")

    with_config(sub.add_parser("generate", help="Synthesize paired volumes and score them"))

    evaluate = sub.add_parser("eval", help="Evaluate FID or Dice")
    evaluate.add_argument("metric", choices=["fid", "dice"])
    evaluate.add_argument("--config", type=Path, default=None, help="Experiment config (feature extractor settings)")
    evaluate.add_argument("--real", type=Path, help="Manifest of real volumes (fid)")
    evaluate.add_argument("--synthetic", type=Path, help="Manifest of synthetic volumes (fid)")
    evaluate.add_argument("--checkpoint", type=Path, help="Segmenter checkpoint (dice)")
    evaluate.add_argument("--manifest", type=Path, help="Manifest to evaluate on (dice)")
    evaluate.add_argument("--split", type=str, default="test")
    evaluate.add_argument("--out", type=Path, default=None, help="Write the scores as JSON")

    run = with_config(sub.add_parser("run", help="Run the pipeline"))
    run.add_argument("--stage", action="append", choices=STAGES, help="Stage to run (repeatable; default: all)")

    report = sub.add_parser("report", help="Build the report of a finished run")
    report.add_argument("--config", type=Path, default=None)
    report.add_argument("--out", type=Path, default=None, help="Run directory (default: from --config)")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


def _train_stage(model: str, stage: str | None) -> str:
    if model == "controlnet":
        stage = None
    elif stage is None:
        stage = "real" if model == "seg" else "image"
    try:
        return TRAIN_STAGES[(model, stage)]
    except KeyError:
        raise SystemExit(f"unknown stage {stage!r} for {model}") from None


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
    print(text)


def _eval(args: argparse.Namespace) -> None:
    if args.metric == "fid":
        if args.real is None or args.synthetic is None:
            raise SystemExit("eval fid needs --real and --synthetic manifests")
        config = load_experiment_config(args.config) if args.config else ExperimentConfig()
        real, synthetic = load_manifest(args.real), load_manifest(args.synthetic)
        real_volumes = [load_record(real, record)[0] for record in real.select(split=args.split)]
        synthetic_volumes = [load_record(synthetic, record)[0] for record in synthetic.records]
        _emit(fid_report(real_volumes, synthetic_volumes, config.metrics).as_dict(), args.out)
        return
    if args.checkpoint is None or args.manifest is None:
        raise SystemExit("eval dice needs --checkpoint and --manifest")
    checkpoint = load_checkpoint(args.checkpoint, kind="segmenter")
    _emit(evaluate_segmenter(checkpoint, load_manifest(args.manifest), split=args.split), args.out)


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "phantom":
        config = _load_config(args)
        if args.base_seed is not None:
            config = config.model_copy(update={"data": config.data.model_copy(update={"base_seed": args.base_seed})})
        if args.out is None:
            run_pipeline(config, ["phantom"])
        else:
            data = config.data
            manifest = generate_phantom_dataset(data.count, data.base_seed, config.phantom, data.splits, args.out)
            save_manifest(manifest, args.out / "manifest.json")
    elif args.command == "train":
        run_pipeline(_load_config(args), [_train_stage(args.model, args.stage)])
    elif args.command == "generate":
        run_pipeline(_load_config(args), ["generate"])
    elif args.command == "eval":
        _eval(args)
    elif args.command == "run":
        run_dir = run_pipeline(_load_config(args), args.stage)
        print(run_dir)
    elif args.command == "report":
        if args.out is None and args.config is None:
            raise SystemExit("report needs --out or --config")
        run_dir = args.out or load_experiment_config(args.config).run_dir()
        build_report(run_dir)
        print(run_dir / "report.md")


if __name__ == "__main__":  # pragma: no cover - CLI bootstrap
    sys.exit(main())
