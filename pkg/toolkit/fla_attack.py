"""
Fast local attack on keypoint detectors.

Selects the detected keypoints (plus their heatmap neighbours), then
repeatedly takes masked sign steps that ascend the per-category
cross-entropy of those points until every point falls below the refresh
threshold or the iteration budget is spent.
"""

import logging
import time
from typing import Dict, Tuple, Union

import numpy as np
import torch

from detector import KeypointDetector, check_image, find_peaks, infer, model_dtype, to_tensor
from models import AttackConfig, AttackMask, AttackTrace, Perturbation, TargetPoint, TargetPointSet, TraceRow
from utils import ValidationError

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

Array = Union[np.ndarray, torch.Tensor]


def select_target_points(heatmap: np.ndarray, threshold: float) -> TargetPointSet:
    """Every strict 3x3 peak >= threshold in any class channel"""
    return TargetPointSet(
        TargetPoint(coords=(w, h), category=c) for w, h, c, _ in find_peaks(heatmap, threshold)
    )


def expand_neighbors(points: TargetPointSet, neighbor_radius: int,
                     heatmap_dims: Tuple[int, int]) -> TargetPointSet:
    """Add every cell within Chebyshev distance neighbor_radius, clamped to (height, width)"""
    height, width = heatmap_dims
    expanded = TargetPointSet(points)
    for point in points:
        w0, h0 = point.coords
        for h in range(max(0, h0 - neighbor_radius), min(height, h0 + neighbor_radius + 1)):
            for w in range(max(0, w0 - neighbor_radius), min(width, w0 + neighbor_radius + 1)):
                expanded.add(TargetPoint(coords=(w, h), category=point.category, is_neighbor=True))
    return expanded


def partition_by_category(points: TargetPointSet) -> Dict[int, TargetPointSet]:
    partition: Dict[int, TargetPointSet] = {}
    for point in points:
        partition.setdefault(point.category, TargetPointSet()).add(point)
    return {category: partition[category] for category in sorted(partition)}


def _check_points(points: TargetPointSet, category: int) -> None:
    if not points:
        raise ValidationError("Target point set for the category loss is empty")
    stray = [p for p in points if p.category != category]
    if stray:
        raise ValidationError(f"Points {stray} do not belong to category {category}")


def heatmap_category_loss(heatmap: torch.Tensor, points: TargetPointSet, category: int) -> torch.Tensor:
    """Sum of -log(activation) over the points, heatmap shaped (1, C, h, w)"""
    _check_points(points, category)
    _, channels, height, width = heatmap.shape
    if not (0 <= category < channels):
        raise ValidationError(f"Category {category} outside {channels} heatmap channels")
    ws = []
    hs = []
    for point in points:
        w, h = point.coords
        if not (0 <= w < width and 0 <= h < height):
            raise ValidationError(f"Point {point.coords} outside heatmap of size {width}x{height}")
        ws.append(w)
        hs.append(h)
    activations = heatmap[0, category, torch.tensor(hs), torch.tensor(ws)]
    return -torch.log(activations.clamp(min=LOG_CLAMP)).sum()


def _forward(model: KeypointDetector, image: np.ndarray) -> Tuple[torch.Tensor, torch.Tensor]:
    """float64 leaf and the heatmap computed from its cast to the model dtype"""
    x = to_tensor(image, dtype=torch.float64).requires_grad_(True)
    heatmap, _, _ = model(x.to(model_dtype(model)))
    return x, heatmap


def category_loss(model: KeypointDetector, image: np.ndarray, points: TargetPointSet,
                  category: int) -> float:
    _check_points(points, category)
    check_image(image, model.config.input_size)
    with torch.no_grad():
        heatmap, _, _ = model(to_tensor(image, dtype=model_dtype(model)))
    return float(heatmap_category_loss(heatmap, points, category).item())


def category_gradient(model: KeypointDetector, image: np.ndarray, points: TargetPointSet,
                      category: int) -> np.ndarray:
    """Gradient of the category loss with respect to the H x W x 3 image"""
    _check_points(points, category)
    check_image(image, model.config.input_size)
    x, heatmap = _forward(model, image)
    (gradient,) = torch.autograd.grad(heatmap_category_loss(heatmap, points, category), x)
    return gradient[0].permute(1, 2, 0).numpy()


def normalize_linf(g: Array) -> Array:
    """g / max|g|, or g unchanged when it is all zero"""
    if isinstance(g, torch.Tensor):
        scale = g.abs().max() if g.numel() else torch.tensor(0.0)
        return g / scale if scale > 0 else g
    g = np.asarray(g)
    scale = np.abs(g).max() if g.size else 0.0
    return g / scale if scale > 0 else g


def generate_mask(points: TargetPointSet, attack_radius: int, image_dims: Tuple[int, int],
                  downsample_ratio: int) -> AttackMask:
    """Union of (2R*+1)-sided squares around the image projections of the points"""
    height, width = image_dims
    if height % downsample_ratio or width % downsample_ratio:
        raise ValidationError(
            f"Image dims {image_dims} not divisible by downsample ratio {downsample_ratio}"
        )
    mask = np.zeros((height, width), dtype=np.uint8)
    half = downsample_ratio // 2
    for point in points:
        w, h = point.coords
        cx = w * downsample_ratio + half
        cy = h * downsample_ratio + half
        mask[max(0, cy - attack_radius):min(height, cy + attack_radius + 1),
             max(0, cx - attack_radius):min(width, cx + attack_radius + 1)] = 1
    return AttackMask(data=mask)


def fla_step(model: KeypointDetector, image: np.ndarray, points: TargetPointSet,
             config: AttackConfig, iteration: int = 1) -> Tuple[np.ndarray, TraceRow, AttackMask]:
    """One masked sign step; returns the next image, its trace row and the mask used"""
    if not points:
        raise ValidationError("fla_step needs a nonempty target point set")

    x, heatmap = _forward(model, image)
    partition = partition_by_category(points)
    direction = torch.zeros_like(x)
    loss_sum: Dict[int, float] = {}
    normalized_max_abs: Dict[int, float] = {}
    categories = list(partition)
    for index, category in enumerate(categories):
        loss = heatmap_category_loss(heatmap, partition[category], category)
        (gradient,) = torch.autograd.grad(loss, x, retain_graph=index < len(categories) - 1)
        normalized = normalize_linf(gradient)
        direction += normalized
        loss_sum[category] = float(loss.item())
        normalized_max_abs[category] = float(normalized.abs().max().item())

    mask = generate_mask(points, config.attack_radius, image.shape[:2], model.config.downsample_ratio)
    sign = np.sign(direction[0].permute(1, 2, 0).numpy())
    update = config.step_size * sign * mask.data[:, :, None]
    next_image = np.clip(image + update, 0.0, 1.0)

    row = TraceRow(
        iteration=iteration,
        remaining_targets=len(points),
        loss_sum=loss_sum,
        normalized_max_abs=normalized_max_abs,
        mask_area_fraction=mask.area_fraction,
    )
    return next_image, row, mask


def refresh_points(model: KeypointDetector, image: np.ndarray, points: TargetPointSet,
                   threshold: float) -> TargetPointSet:
    """Keep the points whose recorded-category activation is still >= threshold"""
    if not points:
        return TargetPointSet()
    heatmap, _, _ = infer(model, image)
    return TargetPointSet(
        p for p in points if heatmap[p.coords[1], p.coords[0], p.category] >= threshold
    )


def run_fla(image: np.ndarray, model: KeypointDetector,
            config: AttackConfig) -> Tuple[Perturbation, AttackTrace]:
    """Attack one H x W x 3 image in [0, 1]; returns r = x_final - x_0 and the trace"""
    start = time.perf_counter()
    check_image(image, model.config.input_size)
    original = np.asarray(image, dtype=np.float64)
    trace = AttackTrace(union_mask=np.zeros(original.shape[:2], dtype=np.uint8))

    heatmap, _, _ = infer(model, original)
    points = select_target_points(heatmap, config.peak_threshold_for(model.config))
    if not points:
        trace.success = True
        trace.elapsed_seconds = time.perf_counter() - start
        return Perturbation(data=np.zeros_like(original), iterations_used=0), trace

    points = expand_neighbors(points, config.neighbor_radius, heatmap.shape[:2])
    attacked = points
    trace.initial_targets = len(points)
    logger.debug(f"FLA: {len(points)} target points in categories {points.categories()}")

    low = original - config.budget
    high = original + config.budget
    current = original.copy()
    iterations = 0
    while points and iterations < config.max_iterations:
        iterations += 1
        current, row, mask = fla_step(model, current, points, config, iteration=iterations)
        current = np.clip(current, low, high)
        np.maximum(trace.union_mask, mask.data, out=trace.union_mask)
        points = refresh_points(model, current, points, config.refresh_threshold)
        row.remaining_targets = len(points)
        trace.rows.append(row)
        logger.debug(
            f"FLA iteration {iterations}: {len(points)} targets left, "
            f"mask area {row.mask_area_fraction:.3f}"
        )

    r = np.clip(current - original, -config.budget, config.budget)
    if not points:
        # removed points may have regained activation in later steps
        adversarial = np.clip(original + r, 0.0, 1.0)
        points = refresh_points(model, adversarial, attacked, config.refresh_threshold)
    trace.success = not points
    trace.elapsed_seconds = time.perf_counter() - start
    return Perturbation(data=r, iterations_used=iterations), trace
