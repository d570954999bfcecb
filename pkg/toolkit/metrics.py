"""
Evaluation metrics: AP/mAP, attack success and transfer ratios,
perceptibility norms and the JPEG save/reload protocol.
"""

import io
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from models import DetectionSet, GroundTruthObject, Perturbation
from utils import CodecError, MetricUndefinedError, ValidationError

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

# Pillow subsampling code for 4:4:4
JPEG_SUBSAMPLING = 0


def box_iou(a: Box, b: Box) -> float:
    ix_min, iy_min = max(a[0], b[0]), max(a[1], b[1])
    ix_max, iy_max = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix_max - ix_min) * max(0.0, iy_max - iy_min)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _all_point_interpolation(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # precision envelope, right to left
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    detections: Sequence[Tuple[str, float, Box]],
    ground_truths: Mapping[str, Sequence[Box]],
    iou_threshold: float = 0.5,
) -> Optional[float]:
    """All-point interpolated AP of one class.

    ``detections`` are (image_id, score, box); ``ground_truths`` maps image id
    to boxes. Returns None when the class has no ground truth.
    """
    if not (0 < iou_threshold < 1):
        raise ValidationError(f"IoU threshold must lie in (0, 1), got {iou_threshold}")
    total = sum(len(boxes) for boxes in ground_truths.values())
    if total == 0:
        return None
    if not detections:
        return 0.0

    scores = np.asarray([d[1] for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in ground_truths.items()}
    true_pos = np.zeros(len(detections))
    for rank, index in enumerate(order):
        image_id, _, box = detections[index]
        gt_boxes = ground_truths.get(image_id, ())
        best_iou, best = 0.0, -1
        for j, gt_box in enumerate(gt_boxes):
            iou = box_iou(box, gt_box)
            if iou > best_iou:
                best_iou, best = iou, j
        if best >= 0 and best_iou >= iou_threshold and not matched[image_id][best]:
            matched[image_id][best] = True
            true_pos[rank] = 1.0

    acc_tp = np.cumsum(true_pos)
    acc_fp = np.cumsum(1.0 - true_pos)
    recall = acc_tp / total
    precision = acc_tp / (acc_tp + acc_fp)
    return _all_point_interpolation(recall, precision)


def mean_average_precision(
    detection_sets: Mapping[str, DetectionSet],
    ground_truths: Mapping[str, Sequence[GroundTruthObject]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> Tuple[float, Dict[int, float]]:
    """Mean of per-class AP over classes that have ground truth"""
    per_class: Dict[int, float] = {}
    for category in range(num_classes):
        class_gts = {
            image_id: [gt.box for gt in gts if gt.category == category]
            for image_id, gts in ground_truths.items()
        }
        class_dets = [
            (image_id, d.score, d.box)
            for image_id, det_set in detection_sets.items()
            for d in det_set.detections
            if d.category == category
        ]
        ap = average_precision(class_dets, class_gts, iou_threshold)
        if ap is None:
            logger.debug(f"Class {category} has no ground truth; excluded from mAP")
            continue
        per_class[category] = ap

    if not per_class:
        logger.warning("No class has ground truth; mAP reported as 0")
        return 0.0, per_class
    return float(np.mean(list(per_class.values()))), per_class


def asr(map_clean: float, map_attack: float) -> float:
    """Attack success ratio 1 - mAP_attack / mAP_clean"""
    if map_clean <= 0:
        raise MetricUndefinedError("ASR is undefined when mAP_clean is 0")
    return 1.0 - map_attack / map_clean


def atr(asr_target: float, asr_origin: float) -> float:
    """Attack transfer ratio ASR_target / ASR_origin"""
    if asr_origin == 0:
        raise MetricUndefinedError("ATR is undefined when ASR_origin is 0")
    return asr_target / asr_origin


def _perturbation_array(r) -> np.ndarray:
    return np.asarray(r.data if isinstance(r, Perturbation) else r, dtype=np.float64)


def perceptibility_l2(r) -> float:
    """RMS over every scalar entry of the perturbation"""
    data = _perturbation_array(r)
    if data.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(data * data)))


def perceptibility_l0(r) -> float:
    """Fraction of pixel positions where any channel changed"""
    data = _perturbation_array(r)
    if data.size == 0:
        return 0.0
    changed = np.any(data != 0, axis=-1)
    return float(changed.mean())


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_jpeg(image: np.ndarray, quality: int) -> bytes:
    """Baseline JPEG with full-resolution (4:4:4) chroma"""
    if not (1 <= int(quality) <= 100):
        raise ValidationError(f"JPEG quality must lie in [1, 100], got {quality}")
    buffer = io.BytesIO()
    try:
        Image.fromarray(to_uint8(image)).save(buffer, format="JPEG", quality=int(quality),
                                               subsampling=JPEG_SUBSAMPLING)
    except (OSError, ValueError) as e:
        raise CodecError(f"JPEG encoding failed: {e}") from e
    return buffer.getvalue()


def decode_image(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise CodecError(f"Image decoding failed: {e}") from e
    return pixels.astype(np.float32) / 255.0


def jpeg_roundtrip(adv_image: np.ndarray, quality: int = 95) -> np.ndarray:
    """Encode to JPEG at the given quality and decode back to [0, 1]"""
    return decode_image(encode_jpeg(adv_image, quality))


def detections_disjoint(clean: DetectionSet, attacked: DetectionSet, iou_threshold: float = 0.5) -> bool:
    """True when no attacked detection matches a clean one by category and IoU"""
    for before in clean.detections:
        for after in attacked.detections:
            if before.category == after.category and box_iou(before.box, after.box) >= iou_threshold:
                return False
    return True


def summarize_norms(perturbations: List[np.ndarray]) -> Tuple[float, float]:
    """Mean P_L2 and mean P_L0 over a set of perturbations"""
    if not perturbations:
        return 0.0, 0.0
    return (
        float(np.mean([perceptibility_l2(r) for r in perturbations])),
        float(np.mean([perceptibility_l0(r) for r in perturbations])),
    )
