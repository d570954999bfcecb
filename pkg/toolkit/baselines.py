"""
Global sign-gradient baselines (FGSM and PGD) driven by the same
detector loss as the local attack, without a mask.
"""

import logging
from typing import Callable, Optional

import numpy as np
import torch

from detector import KeypointDetector, check_image, infer, model_dtype, to_tensor
from fla_attack import heatmap_category_loss, partition_by_category, select_target_points
from models import BaselineConfig, Perturbation, TargetPointSet

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor], torch.Tensor]


def total_detection_loss(model: KeypointDetector, points: TargetPointSet) -> LossFn:
    """Loss over (1, 3, H, W) float64 input: category losses summed over all points"""
    partition = partition_by_category(points)

    def loss_fn(x: torch.Tensor) -> torch.Tensor:
        heatmap, _, _ = model(x.to(model_dtype(model)))
        return sum(heatmap_category_loss(heatmap, subset, category)
                   for category, subset in partition.items())
    return loss_fn


def sign_gradient(loss_fn: LossFn, image: np.ndarray) -> np.ndarray:
    """sign of d loss / d image for an H x W x 3 array"""
    x = to_tensor(image, dtype=torch.float64).requires_grad_(True)
    (gradient,) = torch.autograd.grad(loss_fn(x), x)
    return np.sign(gradient[0].permute(1, 2, 0).numpy())


def fgsm_perturbation(loss_fn: LossFn, image: np.ndarray, budget: float) -> np.ndarray:
    """Single step x + eps * sign(grad), clamped to [0, 1]; returns the perturbation"""
    original = np.asarray(image, dtype=np.float64)
    adversarial = np.clip(original + budget * sign_gradient(loss_fn, original), 0.0, 1.0)
    return np.clip(adversarial - original, -budget, budget)


def pgd_perturbation(
    loss_fn: LossFn,
    image: np.ndarray,
    config: BaselineConfig,
    on_iteration: Optional[Callable[[int, np.ndarray], None]] = None,
) -> np.ndarray:
    """Sign steps of size alpha, each projected onto the L-inf ball then [0, 1]"""
    original = np.asarray(image, dtype=np.float64)
    low = original - config.radius
    high = original + config.radius
    current = original.copy()
    for t in range(1, config.iterations + 1):
        current = current + config.step_size * sign_gradient(loss_fn, current)
        current = np.clip(np.clip(current, low, high), 0.0, 1.0)
        if on_iteration:
            on_iteration(t, current)
    return np.clip(current - original, -config.radius, config.radius)


def _detected_points(model: KeypointDetector, image: np.ndarray) -> TargetPointSet:
    check_image(image, model.config.input_size)
    heatmap, _, _ = infer(model, image)
    return select_target_points(heatmap, model.config.peak_threshold)


def fgsm(image: np.ndarray, model: KeypointDetector,
         config: Optional[BaselineConfig] = None) -> Perturbation:
    config = config or BaselineConfig()
    points = _detected_points(model, image)
    if not points:
        return Perturbation(data=np.zeros(np.shape(image), dtype=np.float64), iterations_used=0)
    data = fgsm_perturbation(total_detection_loss(model, points), image, config.budget)
    return Perturbation(data=data, iterations_used=1)


def run_pgd(
    image: np.ndarray,
    model: KeypointDetector,
    config: Optional[BaselineConfig] = None,
    on_iteration: Optional[Callable[[int, np.ndarray], None]] = None,
) -> Perturbation:
    """Iterative baseline; target points are the clean detections, fixed for all steps"""
    config = config or BaselineConfig()
    points = _detected_points(model, image)
    if not points:
        return Perturbation(data=np.zeros(np.shape(image), dtype=np.float64), iterations_used=0)
    data = pgd_perturbation(total_detection_loss(model, points), image, config, on_iteration)
    logger.debug(f"PGD: {config.iterations} iterations, L-inf {np.abs(data).max():.4f}")
    return Perturbation(data=data, iterations_used=config.iterations)
