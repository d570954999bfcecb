#!/usr/bin/env python3
"""
Command-line entry point: generate, train, attack, transfer, sweep-radius
and gradcheck. Every command writes a manifest.json next to its outputs
and prints the output paths on completion.
"""

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

load_dotenv()  # populate os.environ before the config module reads it

import numpy as np
import PIL
import scipy
import torch

from config import ToolkitConfig, load_section_configs
from detector import finite_difference_check
from experiment_runner import ExperimentRunner
from models import (AttackConfig, AttackKind, BaselineConfig, DatasetConfig, DetectorConfig,
                    RunManifest, TrainConfig, TransferVariant)
from run_logger import RunLogger
from services import (SWEEP_COLUMNS, TRANSFER_COLUMNS, AttackService, ExportService,
                      SweepService, TransferService, load_images)
from shapes_dataset import load_split, write_splits
from trainer import DetectorTrainer, load_checkpoint, save_checkpoint
from utils import (ConfigError, ToolkitError, TrainingGateError, ValidationError,
                   performance_monitor, seed_everything, sha256_file)

logger = logging.getLogger("toolkit.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

GRADCHECK_TOLERANCE = 1e-2
DEFAULT_RADII = "0,2,4,8,16,32"


def _radii(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"radii must be comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("at least one radius is required")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"radii must be non-negative, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be non-negative, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="section.key=value config file")
    common.add_argument("--seed", type=_seed, help="run seed (default FLA_SEED)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=_positive_int, default=ToolkitConfig.WORKERS)
    common.add_argument("--log-level", default=ToolkitConfig.LOG_LEVEL)

    parser = argparse.ArgumentParser(prog="fla-toolkit", description="Local adversarial attacks on keypoint detectors")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="write train/test synthetic splits")
    generate.add_argument("--n-train", type=int)
    generate.add_argument("--n-test", type=int)
    generate.add_argument("--image-size", type=int)

    train = commands.add_parser("train", parents=[common], help="train the toy detector")
    train.add_argument("dataset", type=Path)

    attack = commands.add_parser("attack", parents=[common], help="attack a dataset split")
    attack.add_argument("checkpoint", type=Path)
    attack.add_argument("dataset", type=Path)
    attack.add_argument("--attack", choices=[k.value for k in AttackKind], default=AttackKind.FLA.value)
    attack.add_argument("--split", default="test")
    attack.add_argument("--limit", type=_positive_int, help="attack only the first N images")

    transfer = commands.add_parser("transfer", parents=[common], help="evaluate stored examples on other detectors")
    transfer.add_argument("adv_dir", type=Path)
    transfer.add_argument("targets", type=Path, nargs="+", help="target checkpoint(s)")
    transfer.add_argument("--variant", choices=[v.value for v in TransferVariant],
                          default=TransferVariant.JPEG.value)

    sweep = commands.add_parser("sweep-radius", parents=[common], help="FLA metrics against attack radius")
    sweep.add_argument("checkpoint", type=Path)
    sweep.add_argument("dataset", type=Path)
    sweep.add_argument("--radii", type=_radii, default=_radii(DEFAULT_RADII))
    sweep.add_argument("--split", default="test")
    sweep.add_argument("--limit", type=_positive_int)
    sweep.add_argument("--plot", action="store_true", help="also render sweep.png")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="backprop vs finite differences")
    gradcheck.add_argument("checkpoint", type=Path)
    gradcheck.add_argument("dataset", type=Path)
    gradcheck.add_argument("--split", default="test")
    gradcheck.add_argument("--images", type=_positive_int, default=10)
    gradcheck.add_argument("--pixels", type=_positive_int, default=10)
    return parser


def resolve_configs(args: argparse.Namespace) -> Dict:
    """defaults < environment < --config file < explicit flags"""
    sections = load_section_configs(args.config, {
        "detector": DetectorConfig(),
        "attack": AttackConfig(),
        "baseline": BaselineConfig(),
        "train": TrainConfig(),
        "dataset": DatasetConfig(),
    })
    if args.seed is not None:
        sections["train"] = dataclasses.replace(sections["train"], seed=args.seed)
        sections["dataset"] = dataclasses.replace(sections["dataset"], seed=args.seed)
    return sections


def _versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


def _out_dir(args: argparse.Namespace, default: Path) -> Path:
    out = args.out or default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args: argparse.Namespace, argv: List[str], sections: Dict,
                    outputs: Dict[str, Path], extra: Optional[Dict] = None) -> Path:
    manifest = RunManifest(
        command=args.command,
        argv=list(argv),
        config={name: dataclasses.asdict(cfg) for name, cfg in sections.items()},
        seeds={"run": sections["train"].seed, "dataset": sections["dataset"].seed},
        versions=_versions(),
        timings=performance_monitor.get_durations(),
        outputs={name: str(path) for name, path in outputs.items()},
        extra=extra or {},
        environment=ToolkitConfig.get_all_config(),
    )
    path = out / "manifest.json"
    path.write_text(manifest.to_json() + "\n", encoding="utf-8")
    return path


def _print_paths(paths: Dict[str, Path]) -> None:
    for path in paths.values():
        print(path)


def cmd_generate(args, argv, sections, run_logger) -> int:
    config: DatasetConfig = sections["dataset"]
    n_train = config.n_train if args.n_train is None else args.n_train
    n_test = config.n_test if args.n_test is None else args.n_test
    image_size = config.image_size if args.image_size is None else args.image_size
    if n_train < 0 or n_test < 0:
        raise ValidationError("--n-train and --n-test must be non-negative")
    out = _out_dir(args, Path("data"))

    performance_monitor.start_timer("generate")
    write_splits(out, n_train, n_test, config.seed, image_size)
    performance_monitor.end_timer("generate")

    outputs = {"train": out / "train", "test": out / "test"}
    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "n_train": n_train, "n_test": n_test, "image_size": image_size,
    })
    _print_paths(outputs)
    return EXIT_OK


def cmd_train(args, argv, sections, run_logger) -> int:
    detector_config: DetectorConfig = sections["detector"]
    train_config: TrainConfig = sections["train"]
    train_set = load_split(args.dataset, "train")
    test_set = load_split(args.dataset, "test")
    if train_set.directory == test_set.directory:
        logger.warning(f"{args.dataset} has no train/test splits; evaluating on the training data")
    out = _out_dir(args, Path("runs") / "train")
    seed_everything(train_config.seed)

    performance_monitor.start_timer("train")
    gate_error = None
    try:
        result = DetectorTrainer(detector_config, train_config).train(train_set, test_set)
    except TrainingGateError as e:
        gate_error = e
        result = e.result
    performance_monitor.end_timer("train")

    checkpoint = save_checkpoint(out / "detector.pt", result.model, train_config.seed)
    report = {
        "map_clean": result.map_clean,
        "per_class_ap": {str(k): v for k, v in result.per_class_ap.items()},
        "map_gate": train_config.map_gate,
        "gate_passed": gate_error is None,
        "epochs": train_config.epochs,
        "history": result.history,
        "seconds": result.seconds,
        "checkpoint": str(checkpoint),
        "checkpoint_sha256": sha256_file(checkpoint),
    }
    export = ExportService(out)
    outputs = {"checkpoint": checkpoint,
               "report": export.write_text("train_report.json", _json(report))}
    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "dataset_dir": str(args.dataset), "map_clean": result.map_clean,
    })
    _print_paths(outputs)

    if gate_error is not None:
        logger.error(str(gate_error))
        run_logger.gate_failed("train", gate_error.final_map, gate_error.gate)
        return EXIT_USAGE
    run_logger.run_finished("train", {"mAP@0.5": result.map_clean}, result.seconds)
    return EXIT_OK


def cmd_attack(args, argv, sections, run_logger) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_split(args.dataset, args.split)
    images, ground_truths = load_images(dataset, args.limit)
    if not images:
        raise ValidationError(f"No images in {dataset.directory}")
    kind = AttackKind(args.attack)
    out = _out_dir(args, Path("runs") / kind.value)

    attack_config: AttackConfig = sections["attack"]
    service = AttackService(
        model, kind, ExperimentRunner(args.workers, run_logger),
        attack_config=attack_config,
        baseline_config=sections["baseline"],
        jpeg_quality=attack_config.jpeg_quality,
    )
    performance_monitor.start_timer("attack")
    outcomes = service.run(images)
    performance_monitor.end_timer("attack")
    performance_monitor.start_timer("evaluate")
    report, variant_asr = service.evaluate(images, ground_truths, outcomes)
    performance_monitor.end_timer("evaluate")

    export = ExportService(out)
    export.save_outcomes(outcomes, service.budget, model.config.num_classes)
    outputs = {
        "adversarial": out / "adversarial",
        "adversarial_jpeg": out / "adversarial_jpeg",
        "perturbations": out / "perturbations",
        "report": export.write_report(report),
    }
    if kind is AttackKind.FLA:
        outputs["traces"] = out / "traces"
    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "attack": kind.value,
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": sha256_file(args.checkpoint),
        "dataset_dir": str(dataset.directory),
        "limit": args.limit,
        "variant_asr": variant_asr,
        "report": report.to_dict(),
    })
    _print_paths(outputs)
    run_logger.run_finished("attack", {
        "attack": kind.value, "ASR": report.asr, "P_L0": report.p_l0,
    }, performance_monitor.get_durations().get("attack", 0.0))
    return EXIT_OK


def cmd_transfer(args, argv, sections, run_logger) -> int:
    variant = TransferVariant(args.variant)
    runner = ExperimentRunner(args.workers, run_logger)
    service = TransferService(args.adv_dir, variant, runner)
    origin = service.load_origin()
    adversarial = service.load_adversarial()

    dataset = load_split(origin["extra"]["dataset_dir"], "test")
    clean_images, ground_truths = load_images(dataset)
    out = _out_dir(args, args.adv_dir / "transfer")
    export = ExportService(out)

    outputs: Dict[str, Path] = {}
    rows = []
    names = []
    for index, target in enumerate(args.targets):
        name = target.stem if target.stem not in names else f"{target.stem}_{index}"
        names.append(name)
        model, _ = load_checkpoint(target)
        report = service.evaluate_target(name, model, clean_images, ground_truths, adversarial, origin)
        report_name = "report.json" if len(args.targets) == 1 else f"report_{name}.json"
        outputs[f"report_{name}"] = export.write_report(report, report_name)
        rows.append({"target": str(target), "map_clean": report.map_clean,
                     "map_attack": report.map_attack, "asr": report.asr, "atr": report.atr})
    if len(args.targets) > 1:
        outputs["matrix"] = export.write_csv("transfer_matrix.csv", rows, TRANSFER_COLUMNS)

    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "adv_dir": str(args.adv_dir),
        "variant": variant.value,
        "origin_checkpoint": origin["extra"].get("checkpoint"),
        "targets": [str(t) for t in args.targets],
        "results": rows,
    })
    _print_paths(outputs)
    run_logger.run_finished("transfer", {r["target"]: r["atr"] for r in rows}, 0.0)
    return EXIT_OK


def cmd_sweep_radius(args, argv, sections, run_logger) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_split(args.dataset, args.split)
    images, ground_truths = load_images(dataset, args.limit)
    if not images:
        raise ValidationError(f"No images in {dataset.directory}")
    out = _out_dir(args, Path("runs") / "sweep")

    service = SweepService(model, sections["attack"], ExperimentRunner(args.workers, run_logger))
    performance_monitor.start_timer("sweep")
    rows = service.sweep(images, ground_truths, args.radii)
    performance_monitor.end_timer("sweep")

    export = ExportService(out)
    outputs = {"sweep": export.write_csv("sweep.csv", rows, SWEEP_COLUMNS)}
    if args.plot:
        outputs["plot"] = service.plot(rows, out / "sweep.png")
    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "checkpoint": str(args.checkpoint),
        "dataset_dir": str(dataset.directory),
        "radii": list(args.radii),
        "rows": rows,
    })
    _print_paths(outputs)
    return EXIT_OK


def cmd_gradcheck(args, argv, sections, run_logger) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    dataset = load_split(args.dataset, args.split)
    images, _ = load_images(dataset, args.images)
    if not images:
        raise ValidationError(f"No images in {dataset.directory}")
    out = _out_dir(args, Path("runs") / "gradcheck")
    rng = np.random.default_rng(sections["train"].seed)
    size = model.config.input_size

    rows = []
    for image_id, image in sorted(images.items()):
        pixels = [(int(r), int(c), int(ch)) for r, c, ch in zip(
            rng.integers(0, size, args.pixels), rng.integers(0, size, args.pixels),
            rng.integers(0, 3, args.pixels))]
        errors = finite_difference_check(model, image, pixels)
        rows.extend({"image_id": image_id, "row": p[0], "col": p[1], "channel": p[2],
                     "relative_error": float(e)} for p, e in zip(pixels, errors))

    worst = max(row["relative_error"] for row in rows)
    outputs = {"gradcheck": ExportService(out).write_csv(
        "gradcheck.csv", rows, ["image_id", "row", "col", "channel", "relative_error"])}
    outputs["manifest"] = _write_manifest(out, args, argv, sections, dict(outputs), {
        "max_relative_error": worst, "tolerance": GRADCHECK_TOLERANCE,
    })
    _print_paths(outputs)
    logger.info(f"Max relative gradient error {worst:.3e} over {len(rows)} pixels")
    if worst >= GRADCHECK_TOLERANCE:
        logger.error(f"Gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}")
        return EXIT_USAGE
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "attack": cmd_attack,
    "transfer": cmd_transfer,
    "sweep-radius": cmd_sweep_radius,
    "gradcheck": cmd_gradcheck,
}


def _json(data: Dict) -> str:
    return json.dumps(data, indent=2, sort_keys=True)


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format=ToolkitConfig.LOG_FORMAT,
    )
    run_logger = RunLogger()
    start = time.perf_counter()
    try:
        sections = resolve_configs(args)
        seed = sections["train"].seed
        logger.info(f"Running {args.command} (seed={seed})")
        run_logger.run_started(args.command, seed)
        status = COMMANDS[args.command](args, argv, sections, run_logger)
    except (ValidationError, ConfigError) as e:
        logger.error(str(e))
        run_logger.log_error(args.command, str(e))
        return EXIT_USAGE
    except ToolkitError as e:
        logger.error(str(e))
        run_logger.log_error(args.command, str(e))
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}", exc_info=True)
        run_logger.log_error(args.command, str(e))
        return EXIT_FAILURE
    logger.info(f"{args.command} finished in {time.perf_counter() - start:.1f}s")
    return status


if __name__ == "__main__":
    sys.exit(main())
