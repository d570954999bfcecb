"""
Detector training: Gaussian keypoint targets, focal heatmap loss,
L1 size/offset regression, evaluation and checkpoints.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from detector import KeypointDetector, build_detector, detect, gaussian_radius_sigma
from metrics import mean_average_precision
from models import DetectionSet, DetectorConfig, GroundTruthObject, TrainConfig
from shapes_dataset import ShapesDataset
from utils import CheckpointError, TrainingGateError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_TAG = "fla-toolkit-detector"


def render_targets(
    ground_truth: List[GroundTruthObject], config: DetectorConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Heatmap (C, h, w), size (2, h, w), offset (2, h, w) and regression mask (h, w)"""
    size = config.heatmap_size
    ratio = config.downsample_ratio
    heatmap = np.zeros((config.num_classes, size, size), dtype=np.float32)
    size_target = np.zeros((2, size, size), dtype=np.float32)
    offset_target = np.zeros((2, size, size), dtype=np.float32)
    mask = np.zeros((size, size), dtype=np.float32)

    yy, xx = np.mgrid[0:size, 0:size]
    for gt in ground_truth:
        if not (0 <= gt.category < config.num_classes):
            raise ValidationError(f"Ground-truth category {gt.category} out of range")
        cx, cy = gt.center[0] / ratio, gt.center[1] / ratio
        ix = min(max(int(math.floor(cx)), 0), size - 1)
        iy = min(max(int(math.floor(cy)), 0), size - 1)
        sigma = gaussian_radius_sigma(gt.size[0], gt.size[1], ratio)
        splat = np.exp(-((xx - ix) ** 2 + (yy - iy) ** 2) / (2 * sigma * sigma)).astype(np.float32)
        np.maximum(heatmap[gt.category], splat, out=heatmap[gt.category])
        size_target[:, iy, ix] = gt.size
        offset_target[:, iy, ix] = (cx - ix, cy - iy)
        mask[iy, ix] = 1.0
    return heatmap, size_target, offset_target, mask


class SceneTargetDataset(Dataset):
    """Torch view of a ShapesDataset with rendered training targets"""

    def __init__(self, dataset: ShapesDataset, config: DetectorConfig):
        self.config = config
        self.images = []
        self.targets = []
        for index in range(len(dataset)):
            image = dataset.load_image(index)
            if image.shape != (config.input_size, config.input_size, 3):
                raise ValidationError(
                    f"Dataset image {index} has shape {image.shape}, "
                    f"detector expects {config.input_size}x{config.input_size}"
                )
            self.images.append(torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))))
            self.targets.append(tuple(torch.from_numpy(t) for t in render_targets(dataset.ground_truth(index), config)))

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return (self.images[index], *self.targets[index])


def focal_heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss on Gaussian targets"""
    pred = pred.clamp(1e-4, 1 - 1e-4)
    positive = target.eq(1).float()
    negative = 1.0 - positive
    pos_loss = torch.log(pred) * (1 - pred) ** 2 * positive
    neg_loss = torch.log(1 - pred) * pred ** 2 * (1 - target) ** 4 * negative
    num_pos = positive.sum().clamp(min=1.0)
    return -(pos_loss.sum() + neg_loss.sum()) / num_pos


def masked_l1_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    weight = mask.unsqueeze(1)
    return (torch.abs(pred - target) * weight).sum() / weight.sum().clamp(min=1.0)


def detection_loss(outputs, batch, train_config: TrainConfig) -> Dict[str, torch.Tensor]:
    heatmap, size_map, offset_map = outputs
    _, heat_t, size_t, offset_t, mask = batch
    losses = {
        "heatmap": focal_heatmap_loss(heatmap, heat_t),
        "size": masked_l1_loss(size_map, size_t, mask),
        "offset": masked_l1_loss(offset_map, offset_t, mask),
    }
    losses["total"] = (
        losses["heatmap"]
        + train_config.size_weight * losses["size"]
        + train_config.offset_weight * losses["offset"]
    )
    return losses


def collect_detections(model: KeypointDetector, dataset: ShapesDataset) -> Dict[str, DetectionSet]:
    """Clean detections for every image, keyed by image id"""
    results = {}
    for index in range(len(dataset)):
        image_id, image, _ = dataset[index]
        results[image_id] = detect(model, image, image_id=image_id)
    return results


def ground_truth_map(dataset: ShapesDataset) -> Dict[str, List[GroundTruthObject]]:
    return {dataset.image_ids[i]: dataset.ground_truth(i) for i in range(len(dataset))}


def evaluate_detector(model: KeypointDetector, dataset: ShapesDataset) -> Tuple[float, Dict[int, float]]:
    """mAP@0.5 of the detector on a dataset"""
    model.eval()
    return mean_average_precision(
        collect_detections(model, dataset),
        ground_truth_map(dataset),
        num_classes=model.config.num_classes,
    )


@dataclass
class TrainingResult:
    model: KeypointDetector
    map_clean: float
    per_class_ap: Dict[int, float]
    history: List[Dict[str, float]] = field(default_factory=list)
    seconds: float = 0.0


class DetectorTrainer:
    """Trains a KeypointDetector on a synthetic dataset"""

    def __init__(self, detector_config: DetectorConfig, train_config: TrainConfig):
        self.detector_config = detector_config
        self.train_config = train_config

    def train(
        self,
        train_set: ShapesDataset,
        eval_set: Optional[ShapesDataset] = None,
        progress_callback: Optional[Callable[[int, Dict[str, float]], None]] = None,
    ) -> TrainingResult:
        """Train, evaluate on the held-out split and enforce the mAP gate"""
        if len(train_set) == 0:
            raise ValidationError("Cannot train on an empty dataset")
        config = self.train_config
        start = time.perf_counter()

        model = build_detector(self.detector_config, seed=config.seed)
        data = SceneTargetDataset(train_set, self.detector_config)
        generator = torch.Generator().manual_seed(config.seed)
        loader = DataLoader(data, batch_size=config.batch_size, shuffle=True,
                            generator=generator, num_workers=0, drop_last=False)

        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        milestones = [int(config.epochs * 0.6), int(config.epochs * 0.85)]
        scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=0.1)

        history = []
        for epoch in range(1, config.epochs + 1):
            model.train()
            totals = {"total": 0.0, "heatmap": 0.0, "size": 0.0, "offset": 0.0}
            batches = 0
            for batch in loader:
                outputs = model(batch[0])
                losses = detection_loss(outputs, batch, config)
                optimizer.zero_grad()
                losses["total"].backward()
                optimizer.step()
                for key in totals:
                    totals[key] += losses[key].item()
                batches += 1
            scheduler.step()
            row = {key: value / max(batches, 1) for key, value in totals.items()}
            row["epoch"] = epoch
            history.append(row)
            logger.info(
                f"Epoch {epoch}/{config.epochs}: loss={row['total']:.4f} "
                f"(heatmap={row['heatmap']:.4f}, size={row['size']:.3f}, offset={row['offset']:.3f})"
            )
            if progress_callback:
                progress_callback(epoch, row)

        model.eval()
        evaluation = eval_set if eval_set is not None and len(eval_set) > 0 else train_set
        map_clean, per_class = evaluate_detector(model, evaluation)
        seconds = time.perf_counter() - start
        logger.info(f"Training finished in {seconds:.1f}s, mAP@0.5 = {map_clean:.4f}")

        result = TrainingResult(model=model, map_clean=map_clean, per_class_ap=per_class,
                                history=history, seconds=seconds)
        if map_clean < config.map_gate:
            error = TrainingGateError(map_clean, config.map_gate)
            error.result = result
            raise error
        return result


def train_detector(
    train_set: ShapesDataset,
    train_config: TrainConfig,
    detector_config: Optional[DetectorConfig] = None,
    eval_set: Optional[ShapesDataset] = None,
) -> TrainingResult:
    return DetectorTrainer(detector_config or DetectorConfig(), train_config).train(train_set, eval_set)


def save_checkpoint(path: Union[str, Path], model: KeypointDetector, seed: int) -> Path:
    """Single-file checkpoint with version tag and detector config"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tag": CHECKPOINT_TAG,
        "format_version": CHECKPOINT_VERSION,
        "detector_config": asdict(model.config),
        "seed": int(seed),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[DetectorConfig] = None
) -> Tuple[KeypointDetector, Dict]:
    """Load a detector, validating version tag and config compatibility"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("tag") != CHECKPOINT_TAG:
        raise CheckpointError(f"{path} is not a detector checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')}"
        )
    try:
        config = DetectorConfig(**payload["detector_config"])
    except (TypeError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid detector config: {e}") from e

    if expected_config is not None:
        mismatched = [
            key for key in ("input_size", "downsample_ratio", "num_classes", "channels")
            if getattr(config, key) != getattr(expected_config, key)
        ]
        if mismatched:
            raise CheckpointError(f"{path}: detector config mismatch in {', '.join(mismatched)}")

    model = KeypointDetector(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {"seed": payload.get("seed"), "format_version": payload["format_version"]}
    return model, meta
