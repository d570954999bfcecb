"""
Service layer for the FLA toolkit.
Evaluation, attack, transfer, sweep and export logic between the CLI and
the algorithm modules.
"""

import csv
import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from baselines import fgsm, run_pgd
from detector import KeypointDetector, detect
from experiment_runner import ExperimentRunner
from fla_attack import run_fla
from metrics import (asr, atr, decode_image, detections_disjoint, encode_jpeg,
                     mean_average_precision, summarize_norms, to_uint8)
from models import (AttackConfig, AttackKind, AttackOutcome, BaselineConfig, DetectionSet,
                    GroundTruthObject, MetricsReport, TransferVariant)
from shapes_dataset import ShapesDataset
from utils import DatasetFormatError, MetricUndefinedError, ValidationError

logger = logging.getLogger(__name__)

ADVERSARIAL_DIR = "adversarial"
JPEG_DIR = "adversarial_jpeg"
PERTURBATION_DIR = "perturbations"
TRACE_DIR = "traces"
SWEEP_COLUMNS = ["attack_radius", "asr", "p_l0", "p_l2", "mean_time_s", "mean_iterations"]
TRANSFER_COLUMNS = ["target", "map_clean", "map_attack", "asr", "atr"]

Images = Dict[str, np.ndarray]
GroundTruths = Dict[str, List[GroundTruthObject]]


def load_images(dataset: ShapesDataset, limit: Optional[int] = None) -> Tuple[Images, GroundTruths]:
    """Images and ground truth keyed by image id, optionally the first `limit` only"""
    count = len(dataset) if limit is None else min(limit, len(dataset))
    images: Images = {}
    ground_truths: GroundTruths = {}
    for index in range(count):
        image_id, image, gts = dataset[index]
        images[image_id] = image
        ground_truths[image_id] = gts
    return images, ground_truths


def _quantized(image: np.ndarray) -> np.ndarray:
    """What an 8-bit lossless file stores for a float image"""
    return to_uint8(image).astype(np.float32) / 255.0


class EvaluationService:
    """Runs the detector over image sets and scores the detections"""

    def __init__(self, model: KeypointDetector, runner: ExperimentRunner):
        self.model = model
        self.runner = runner

    def detect_all(self, images: Images, label: str = "detect") -> Dict[str, DetectionSet]:
        items = sorted(images.items())
        results = self.runner.map(
            items, lambda image: detect(self.model, np.asarray(image, dtype=np.float32)), label
        )
        return dict(results)

    def mean_ap(self, images: Images, ground_truths: GroundTruths,
                label: str = "detect") -> Tuple[float, Dict[int, float], Dict[str, DetectionSet]]:
        detections = self.detect_all(images, label)
        map_value, per_class = mean_average_precision(
            detections, ground_truths, num_classes=self.model.config.num_classes
        )
        return map_value, per_class, detections


class AttackService:
    """Generates adversarial examples with one attack and reports its metrics"""

    def __init__(self, model: KeypointDetector, kind: AttackKind, runner: ExperimentRunner,
                 attack_config: Optional[AttackConfig] = None,
                 baseline_config: Optional[BaselineConfig] = None,
                 jpeg_quality: int = 95):
        self.model = model
        self.kind = kind
        self.runner = runner
        self.attack_config = attack_config or AttackConfig()
        self.baseline_config = baseline_config or BaselineConfig()
        self.jpeg_quality = jpeg_quality
        self.evaluation = EvaluationService(model, runner)

    @property
    def budget(self) -> float:
        if self.kind is AttackKind.FLA:
            return self.attack_config.budget
        if self.kind is AttackKind.FGSM:
            return self.baseline_config.budget
        return self.baseline_config.radius

    def attack_image(self, image_id: str, image: np.ndarray) -> AttackOutcome:
        start = time.perf_counter()
        trace = None
        if self.kind is AttackKind.FLA:
            perturbation, trace = run_fla(image, self.model, self.attack_config)
        elif self.kind is AttackKind.FGSM:
            perturbation = fgsm(image, self.model, self.baseline_config)
        else:
            perturbation = run_pgd(image, self.model, self.baseline_config)
        seconds = time.perf_counter() - start

        adversarial = np.clip(np.asarray(image, dtype=np.float64) + perturbation.data, 0.0, 1.0)
        outcome = AttackOutcome(
            image_id=image_id,
            perturbation=perturbation,
            adversarial=adversarial,
            seconds=seconds,
            trace=trace,
            jpeg_bytes=encode_jpeg(adversarial, self.jpeg_quality),
        )
        logger.debug(
            f"{self.kind.value} on {image_id}: {perturbation.iterations_used} iterations, "
            f"{seconds:.2f}s, success={trace.success if trace else 'n/a'}"
        )
        return outcome

    def run(self, images: Images) -> List[AttackOutcome]:
        items = [(image_id, (image_id, image)) for image_id, image in sorted(images.items())]
        results = self.runner.map(items, lambda pair: self.attack_image(*pair), self.kind.value)
        return [outcome for _, outcome in results]

    def evaluate(self, images: Images, ground_truths: GroundTruths,
                 outcomes: Sequence[AttackOutcome]) -> Tuple[MetricsReport, Dict[str, float]]:
        """Aggregate report plus the ASR of each saved-file variant"""
        if not outcomes:
            raise ValidationError("No attack outcomes to evaluate")
        ids = [o.image_id for o in outcomes]
        clean_images = {image_id: images[image_id] for image_id in ids}
        gts = {image_id: ground_truths[image_id] for image_id in ids}

        map_clean, _, clean = self.evaluation.mean_ap(clean_images, gts, "clean")
        map_attack, _, attacked = self.evaluation.mean_ap(
            {o.image_id: o.adversarial for o in outcomes}, gts, "attacked")
        jpeg_map, _, _ = self.evaluation.mean_ap(
            {o.image_id: decode_image(o.jpeg_bytes) for o in outcomes}, gts, "attacked-jpeg")
        lossless_map, _, _ = self.evaluation.mean_ap(
            {o.image_id: _quantized(o.adversarial) for o in outcomes}, gts, "attacked-lossless")

        p_l2, p_l0 = summarize_norms([o.perturbation.data for o in outcomes])
        disjoint = [detections_disjoint(clean[i], attacked[i]) for i in ids]
        report = MetricsReport(
            attack=self.kind.value,
            map_clean=map_clean,
            map_attack=map_attack,
            asr=asr(map_clean, map_attack),
            p_l2=p_l2,
            p_l0=p_l0,
            mean_attack_time=float(np.mean([o.seconds for o in outcomes])),
            num_images=len(outcomes),
            mean_iterations=float(np.mean([o.iterations for o in outcomes])),
            success_rate=float(np.mean(disjoint)),
            jpeg_map_attack=jpeg_map,
            jpeg_asr=asr(map_clean, jpeg_map),
        )
        variants = {
            TransferVariant.JPEG.value: report.jpeg_asr,
            TransferVariant.LOSSLESS.value: asr(map_clean, lossless_map),
        }
        logger.info(
            f"{self.kind.value}: mAP clean {map_clean:.4f} -> attack {map_attack:.4f}, "
            f"ASR {report.asr:.4f} (JPEG {report.jpeg_asr:.4f}), P_L0 {p_l0:.3f}, "
            f"{report.mean_attack_time:.2f}s/image"
        )
        return report, variants


class TransferService:
    """Evaluates stored adversarial examples on other detectors"""

    def __init__(self, adv_dir: Path, variant: TransferVariant, runner: ExperimentRunner):
        self.adv_dir = Path(adv_dir)
        self.variant = variant
        self.runner = runner

    def load_origin(self) -> Dict:
        path = self.adv_dir / "manifest.json"
        if not path.is_file():
            raise DatasetFormatError(path, None, "missing origin run manifest")
        try:
            with open(path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(path, e.lineno, f"invalid JSON: {e.msg}") from e
        for key in ("dataset_dir", "variant_asr", "report"):
            if key not in manifest.get("extra", {}):
                raise DatasetFormatError(path, None, f"origin manifest lacks {key!r}")
        return manifest

    def load_adversarial(self) -> Images:
        if self.variant is TransferVariant.JPEG:
            directory, pattern = self.adv_dir / JPEG_DIR, "*.jpg"
        else:
            directory, pattern = self.adv_dir / ADVERSARIAL_DIR, "*.png"
        paths = sorted(directory.glob(pattern)) if directory.is_dir() else []
        if not paths:
            raise ValidationError(f"No adversarial images ({pattern}) found in {directory}")
        return {path.stem: decode_image(path.read_bytes()) for path in paths}

    def evaluate_target(self, name: str, model: KeypointDetector, clean_images: Images,
                        ground_truths: GroundTruths, adversarial: Images,
                        origin: Dict) -> MetricsReport:
        missing = sorted(set(adversarial) - set(clean_images))
        if missing:
            raise ValidationError(f"Adversarial images without clean counterpart: {missing[:5]}")
        ids = sorted(adversarial)
        clean = {i: clean_images[i] for i in ids}
        gts = {i: ground_truths[i] for i in ids}

        evaluation = EvaluationService(model, self.runner)
        map_clean, _, _ = evaluation.mean_ap(clean, gts, f"{name}-clean")
        map_attack, _, _ = evaluation.mean_ap(adversarial, gts, f"{name}-attacked")
        target_asr = asr(map_clean, map_attack)

        origin_asr = origin["extra"]["variant_asr"][self.variant.value]
        try:
            transfer_ratio = atr(target_asr, origin_asr)
        except MetricUndefinedError as e:
            logger.warning(f"{name}: {e}")
            transfer_ratio = None

        p_l2, p_l0 = summarize_norms(
            [adversarial[i] - np.asarray(clean[i], dtype=np.float32) for i in ids]
        )
        origin_report = origin["extra"]["report"]
        report = MetricsReport(
            attack=origin_report.get("attack", "fla"),
            map_clean=map_clean,
            map_attack=map_attack,
            asr=target_asr,
            p_l2=p_l2,
            p_l0=p_l0,
            mean_attack_time=float(origin_report.get("mean_attack_time", 0.0)),
            num_images=len(ids),
            mean_iterations=float(origin_report.get("mean_iterations", 0.0)),
            atr=transfer_ratio,
        )
        logger.info(
            f"Transfer to {name} ({self.variant.value}): ASR {target_asr:.4f}, "
            f"ATR {transfer_ratio if transfer_ratio is None else round(transfer_ratio, 4)}"
        )
        return report


class SweepService:
    """ASR and perceptibility of FLA as a function of the attack radius"""

    def __init__(self, model: KeypointDetector, attack_config: AttackConfig, runner: ExperimentRunner):
        self.model = model
        self.attack_config = attack_config
        self.runner = runner

    def sweep(self, images: Images, ground_truths: GroundTruths, radii: Sequence[int]) -> List[Dict]:
        if not radii:
            raise ValidationError("At least one attack radius is required")
        negative = [r for r in radii if r < 0]
        if negative:
            raise ValidationError(f"Attack radii must be non-negative, got {negative}")

        evaluation = EvaluationService(self.model, self.runner)
        map_clean, _, _ = evaluation.mean_ap(images, ground_truths, "clean")
        rows = []
        for radius in radii:
            config = dataclasses.replace(self.attack_config, attack_radius=int(radius))
            service = AttackService(self.model, AttackKind.FLA, self.runner, attack_config=config)
            outcomes = service.run(images)
            map_attack, _, _ = evaluation.mean_ap(
                {o.image_id: o.adversarial for o in outcomes}, ground_truths, f"R*={radius}")
            p_l2, p_l0 = summarize_norms([o.perturbation.data for o in outcomes])
            row = {
                "attack_radius": int(radius),
                "asr": asr(map_clean, map_attack),
                "p_l0": p_l0,
                "p_l2": p_l2,
                "mean_time_s": float(np.mean([o.seconds for o in outcomes])),
                "mean_iterations": float(np.mean([o.iterations for o in outcomes])),
            }
            logger.info(
                f"R*={radius}: ASR {row['asr']:.4f}, P_L0 {p_l0:.3f}, "
                f"{row['mean_time_s']:.2f}s/image, {row['mean_iterations']:.1f} iterations"
            )
            rows.append(row)
        return rows

    @staticmethod
    def plot(rows: List[Dict], path: Path) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        radii = [row["attack_radius"] for row in rows]
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
        for ax, key, label in zip(axes, ("asr", "p_l0", "mean_time_s"),
                                  ("ASR", "P_L0", "Time per image (s)")):
            ax.plot(radii, [row[key] for row in rows], marker="o")
            ax.set_xlabel("Attack radius R* (px)")
            ax.set_ylabel(label)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


class ExportService:
    """Writes images, traces, reports and CSV tables under one output directory"""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def _subdir(self, name: str) -> Path:
        path = self.out_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_outcome(self, outcome: AttackOutcome, budget: float, num_classes: int) -> None:
        image_id = outcome.image_id
        Image.fromarray(to_uint8(outcome.adversarial)).save(
            self._subdir(ADVERSARIAL_DIR) / f"{image_id}.png", format="PNG")
        (self._subdir(JPEG_DIR) / f"{image_id}.jpg").write_bytes(outcome.jpeg_bytes)
        visual = 0.5 + outcome.perturbation.data / (2.0 * budget)
        Image.fromarray(to_uint8(visual)).save(
            self._subdir(PERTURBATION_DIR) / f"{image_id}.png", format="PNG")
        if outcome.trace is not None:
            (self._subdir(TRACE_DIR) / f"{image_id}.csv").write_text(
                outcome.trace.to_csv(num_classes), encoding="utf-8")

    def save_outcomes(self, outcomes: Sequence[AttackOutcome], budget: float, num_classes: int) -> None:
        for outcome in outcomes:
            self.save_outcome(outcome, budget, num_classes)
        logger.info(f"Saved {len(outcomes)} adversarial examples to {self.out_dir}")

    def write_text(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        return path

    def write_report(self, report: MetricsReport, name: str = "report.json") -> Path:
        return self.write_text(name, report.to_json())

    def write_csv(self, name: str, rows: Sequence[Dict], columns: Sequence[str]) -> Path:
        path = self.out_dir / name
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns))
            writer.writeheader()
            for row in rows:
                writer.writerow({key: _csv_value(row.get(key)) for key in columns})
        return path


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return value
