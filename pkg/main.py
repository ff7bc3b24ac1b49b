"""
Plaque Segmentation - Main Entry Point

Command-line surface of the segmentation library: dataset preparation,
training, evaluation and prediction. Every command that produces files
writes a run manifest next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 data or export
error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from src.checkpoint import load_checkpoint
from src.config_loader import ConfigLoader, hash_config, list_presets, runs_dir
from src.data_loader import (
    BOUNDARY_OPS,
    PLAQUE,
    SPLITS,
    build_supervision,
    describe_dataset,
    import_flat_dataset,
    list_sample_ids,
    load_dataset,
    load_image_tensor,
    read_label_mask,
    write_label_mask,
)
from src.errors import DatasetError, ExportError, SegmentationError
from src.inference import evaluate_model, export_masks, predict
from src.losses import CCM_REDUCTIONS
from src.metrics import AVERAGING_MODES, EVAL_MODES, read_clinician_csv
from src.plots import write_report_plots
from src.run_manifest import RunManifest
from src.sdnet import build_model, count_parameters
from src.trainer import LOG_FILE, train_loop

logger = logging.getLogger("sdseg")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"


def print_separator():
    """Print a visual separator line."""
    print("\n" + "=" * 80 + "\n")


def cmd_prepare_boundaries(args: argparse.Namespace, manifest: RunManifest) -> int:
    """
    Write boundary maps for every sample into <root>/<split>/boundaries/{teeth,plaque}.

    Re-running overwrites the files with identical content.
    """
    root = Path(args.root)
    splits = [args.split] if args.split else [s for s in SPLITS if (root / s).is_dir()]
    manifest.output_dir = str(runs_dir() / "prepare-boundaries")
    manifest.details.update({"root": str(root), "boundary_op": args.boundary_op, "samples": {}})

    for split in splits:
        split_dir = root / split
        ids = list_sample_ids(root, split)
        for stem in ids:
            mask_path = split_dir / "masks" / f"{stem}.png"
            if not mask_path.exists():
                raise DatasetError(f"Missing mask for image '{stem}': expected {mask_path}")
            supervision = build_supervision(read_label_mask(mask_path), args.boundary_op)
            write_label_mask(split_dir / "boundaries" / "teeth" / f"{stem}.png", supervision.teeth_boundary)
            write_label_mask(split_dir / "boundaries" / "plaque" / f"{stem}.png", supervision.plaque_boundary)
        manifest.details["samples"][split] = len(ids)
        manifest.add_artifact(f"boundaries_{split}", split_dir / "boundaries")
        print(f"{split}: wrote boundaries for {len(ids)} samples")

    return 0


def cmd_train(args: argparse.Namespace, manifest: RunManifest) -> int:
    """
    Train a model from a configuration file or preset.
    """
    loader = ConfigLoader(args.config)
    loader.apply_overrides({
        "name": args.name,
        "seed": args.seed,
        "deterministic": args.deterministic,
        "eval_mode": args.eval_mode,
        "data.root": args.root,
        "data.boundary_op": args.boundary_op,
        "loss_weights.ccm_reduction": args.ccm_reduction,
    })
    config = loader.get_train_config()
    run_dir = runs_dir() / config.name

    manifest.config_path = str(loader.config_path)
    manifest.config_hash = loader.config_hash()
    manifest.seed = config.seed
    manifest.output_dir = str(run_dir)
    manifest.details.update({
        "ablation": sorted(config.ablation),
        "dataset_profile": config.dataset_profile,
        "resolved_config": loader.config,
    })

    print(f"Training '{config.name}' with components {sorted(config.ablation)} -> {run_dir}")
    best = train_loop(
        config,
        run_dir,
        resume_from=Path(args.resume) if args.resume else None,
        progress=logger.getEffectiveLevel() <= logging.INFO,
    )

    manifest.add_artifact("best_checkpoint", best.path)
    manifest.add_artifact("train_log", run_dir / LOG_FILE)
    manifest.details.update({"best_epoch": best.epoch, "best_metrics": best.metrics.get("val")})

    print_separator()
    print(f"Best checkpoint: {best.path} (epoch {best.epoch}, step {best.global_step})")
    for key, value in (best.metrics.get("val") or {}).items():
        print(f"  {key}: {value:.4f}")
    return 0


def cmd_evaluate(args: argparse.Namespace, manifest: RunManifest) -> int:
    """
    Evaluate a checkpoint on a dataset split and write the report and plots.
    """
    checkpoint, model = load_checkpoint(Path(args.checkpoint), inference_only=True)
    root = Path(args.root or checkpoint.train_config.get("data", {}).get("root", "./data/sdpseg"))
    output = Path(args.output) if args.output else checkpoint.path.parent / f"eval-{args.split}"
    manifest.config_hash = hash_config(checkpoint.train_config)
    manifest.seed = checkpoint.seed
    manifest.output_dir = str(output)

    records = load_dataset(root, args.split, input_size=checkpoint.model_config.input_size)
    if not records:
        raise DatasetError(f"No samples in split '{args.split}' under {root}")

    clinician = read_clinician_csv(Path(args.clinician_csv)) if args.clinician_csv else None
    report = evaluate_model(
        model, records, eval_mode=args.eval_mode, averaging=args.averaging, clinician_estimates=clinician,
    )

    manifest.details.update({
        "checkpoint": str(checkpoint.path),
        "root": str(root),
        "split": args.split,
        "aggregate": report.aggregate,
    })
    manifest.add_artifact("report_json", report.save_json(output / REPORT_JSON))
    manifest.add_artifact("report_csv", report.save_csv(output / REPORT_CSV))
    for name, path in write_report_plots(report, output).items():
        manifest.add_artifact(name, path)

    print(f"Evaluated {len(records)} '{args.split}' images ({report.averaging} averaging, {report.eval_mode} mode)")
    for key, value in report.aggregate.items():
        print(f"  {key}: {value:.4f}")
    print(f"Report written to {output}")
    return 0


def _collect_images(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [path]


def cmd_predict(args: argparse.Namespace, manifest: RunManifest) -> int:
    """
    Predict label maps for one image or a directory of images.

    A file that cannot be read or written is reported and skipped; the
    command then exits with the data error code.
    """
    source = Path(args.input)
    if not source.exists():
        raise DatasetError(f"Input not found: {source}")

    checkpoint, model = load_checkpoint(Path(args.checkpoint), inference_only=True)
    output = Path(args.output)
    output.mkdir(parents=True, exist_ok=True)
    manifest.seed = checkpoint.seed
    manifest.config_hash = hash_config(checkpoint.train_config)
    manifest.output_dir = str(output)

    input_size = checkpoint.model_config.input_size
    written, failed = 0, []
    for image_path in _collect_images(source):
        try:
            image = load_image_tensor(image_path, input_size)
            prediction = predict(model, image)[0]
            export_masks(prediction, output / f"{image_path.stem}.png", with_probabilities=args.probabilities)
            written += 1
        except (DatasetError, ExportError) as e:
            logger.error("Skipping %s: %s", image_path, e)
            failed.append(str(image_path))

    manifest.details.update({"checkpoint": str(checkpoint.path), "written": written, "failed": failed})
    manifest.add_artifact("masks", output)
    print(f"Wrote {written} masks to {output}")
    if failed:
        print(f"Failed: {len(failed)} files (see log)")
        return DatasetError.exit_code
    return 0


def cmd_import_dataset(args: argparse.Namespace, manifest: RunManifest) -> int:
    """
    Convert a flat images/ + masks/ dataset with binary masks into the split layout.
    """
    split = import_flat_dataset(
        Path(args.source), Path(args.root), seed=args.seed, foreground_label=args.foreground_label,
    )
    manifest.seed = args.seed
    manifest.output_dir = str(runs_dir() / "import-dataset")
    manifest.add_artifact("dataset", args.root)
    manifest.details.update({"train": len(split.train), "val": len(split.val), "test": len(split.test)})
    print(f"Imported into {args.root}: {len(split.train)} train, {len(split.val)} val, {len(split.test)} test")
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    """
    List the shipped experiment presets by group.
    """
    for group, names in list_presets().items():
        print(f"{group}:")
        for name in names:
            print(f"  {name}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    """
    Perform a system check and display the resolved configuration.
    """
    print("System Configuration Check")
    print_separator()

    status = {"torch": True, "cuda": torch.cuda.is_available()}
    try:
        loader = ConfigLoader(args.config)
        config = loader.get_train_config()
        status["config"] = True
    except (SegmentationError, FileNotFoundError) as e:
        print(f"Configuration invalid: {e}")
        return 1

    root = Path(args.root or config.data.root)
    status["dataset"] = (root / "train").is_dir()

    print("Component Status:")
    for component, is_active in status.items():
        status_symbol = "[OK]" if is_active else "[FAIL]"
        print(f"  {status_symbol} {component}: {is_active}")
    print_separator()

    model = build_model(config.model, seed=config.seed, components=config.ablation)
    print(f"Run name:        {config.name}")
    print(f"Config hash:     {loader.config_hash()}")
    print(f"Components:      {sorted(config.ablation)}")
    print(f"Parameters:      {count_parameters(model):,}")
    if status["dataset"]:
        records = load_dataset(root, "train", input_size=config.model.input_size)
        summary = describe_dataset(records)
        print(f"Train samples:   {summary['samples']}")
        print(f"Plaque-free:     {summary['plaque_free_fraction']:.1%}")
    else:
        print(f"Warning: no training split under {root}")
    return 0


class _ArgumentParser(argparse.ArgumentParser):
    """Argument parser reporting usage errors with exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="sdseg", description="Dental plaque segmentation")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging verbosity",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    prepare = commands.add_parser("prepare-boundaries", help="Precompute boundary maps")
    prepare.add_argument("--root", required=True, help="Dataset root")
    prepare.add_argument("--split", choices=SPLITS, help="Single split (default: all present)")
    prepare.add_argument("--boundary-op", choices=BOUNDARY_OPS, default="neighbor")

    train = commands.add_parser("train", help="Train a model")
    train.add_argument("--config", default="config.yaml", help="YAML file or preset name")
    train.add_argument("--root", help="Dataset root")
    train.add_argument("--name", help="Run name")
    train.add_argument("--seed", type=int)
    train.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    train.add_argument("--eval-mode", choices=EVAL_MODES)
    train.add_argument("--boundary-op", choices=BOUNDARY_OPS)
    train.add_argument("--ccm-reduction", choices=CCM_REDUCTIONS)
    train.add_argument("--resume", help="Checkpoint directory to resume from")

    evaluate = commands.add_parser("evaluate", help="Evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--root", help="Dataset root (default: the training root)")
    evaluate.add_argument("--split", choices=SPLITS, default="test")
    evaluate.add_argument("--eval-mode", choices=EVAL_MODES, default="fused")
    evaluate.add_argument("--averaging", choices=AVERAGING_MODES, default="image")
    evaluate.add_argument("--clinician-csv", help="CSV with columns id,pr")
    evaluate.add_argument("--output", help="Report directory")

    pred = commands.add_parser("predict", help="Predict masks for images")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--input", required=True, help="Image file or directory")
    pred.add_argument("--output", required=True, help="Output directory")
    pred.add_argument("--probabilities", action="store_true", help="Also write 16-bit probability maps")

    imported = commands.add_parser("import-dataset", help="Import a flat binary-mask dataset")
    imported.add_argument("--source", required=True, help="Directory with images/ and masks/")
    imported.add_argument("--root", required=True, help="Output dataset root")
    imported.add_argument("--seed", type=int, default=0)
    imported.add_argument("--foreground-label", type=int, choices=[1, 2], default=PLAQUE)

    commands.add_parser("presets", help="List experiment presets")

    check = commands.add_parser("check", help="Check environment and configuration")
    check.add_argument("--config", default="config.yaml")
    check.add_argument("--root")

    return parser


MANIFEST_COMMANDS = {
    "prepare-boundaries": cmd_prepare_boundaries,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "import-dataset": cmd_import_dataset,
}
INFO_COMMANDS = {"presets": cmd_presets, "check": cmd_check}


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point with command-line interface.

    Returns:
        int: Process exit code
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command in INFO_COMMANDS:
        try:
            return INFO_COMMANDS[args.command](args)
        except SegmentationError as e:
            logger.error("%s: %s", type(e).__name__, e)
            return e.exit_code

    manifest = RunManifest(
        command=args.command,
        config_path=getattr(args, "config", None),
        argv=list(sys.argv if argv is None else argv),
    )
    exit_code = 1
    try:
        exit_code = MANIFEST_COMMANDS[args.command](args, manifest)
    except SegmentationError as e:
        logger.error("%s: %s", type(e).__name__, e)
        exit_code = e.exit_code
    except FileNotFoundError as e:
        logger.error("%s", e)
        exit_code = 1
    finally:
        manifest.finish(exit_code)
        manifest.write(Path(manifest.output_dir or runs_dir() / args.command))

    return exit_code


if __name__ == "__main__":
    sys.exit(main())
