"""
Miniature anchor-free keypoint detector: heatmap, size and offset heads
on a four-stage stride-2 encoder with a pooled global-context bottleneck
and a two-stage upsampling decoder.
"""

import copy
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import maximum_filter

from models import Detection, DetectionSet, DetectorConfig
from utils import ValidationError

logger = logging.getLogger(__name__)

HEATMAP_BIAS_INIT = -2.19


class ConvUnit(nn.Module):

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        # smooth activation keeps finite-difference checks well conditioned
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class UpUnit(nn.Module):

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = ConvUnit(in_channels, out_channels)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2.0, mode='nearest')
        return self.conv(x) + skip


class GlobalContext(nn.Module):
    """Adds a pooled image-wide feature back onto every bottleneck cell"""

    def __init__(self, channels):
        super().__init__()
        self.fc = nn.Conv2d(channels, channels, 1, 1, 0, bias=True)
        self.act = nn.SiLU()

    def forward(self, x):
        avg_feat = F.adaptive_avg_pool2d(x, (1, 1))
        return x + self.act(self.fc(avg_feat))


class Head(nn.Module):

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, 1, 1, bias=True)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv2d(in_channels, out_channels, 1, 1, 0, bias=True)

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class KeypointDetector(nn.Module):
    """Center-keypoint detector with downsample ratio 4"""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        c1, c2, c3, c4 = config.channels
        self.stage1 = ConvUnit(3, c1, stride=2)
        self.stage2 = ConvUnit(c1, c2, stride=2)
        self.stage3 = ConvUnit(c2, c3, stride=2)
        self.stage4 = ConvUnit(c3, c4, stride=2)
        self.context = GlobalContext(c4)
        self.up1 = UpUnit(c4, c3)
        self.up2 = UpUnit(c3, c2)
        self.heatmap_head = Head(c2, config.num_classes)
        self.size_head = Head(c2, 2)
        self.offset_head = Head(c2, 2)
        self.init_weights()

    def init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity='relu')
                if m.bias is not None:
                    m.bias.data.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.data.fill_(1)
                m.bias.data.zero_()
        for head in (self.heatmap_head, self.size_head, self.offset_head):
            head.conv2.weight.data.normal_(0, 0.01)
        self.heatmap_head.conv2.bias.data.fill_(HEATMAP_BIAS_INIT)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, 3, S, S) images -> heatmap (B, C, S/4, S/4), size and offset (B, 2, S/4, S/4)"""
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValidationError(
                f"Expected input of shape (B, 3, {size}, {size}), got {tuple(x.shape)}"
            )
        f2 = self.stage2(self.stage1(x))
        f3 = self.stage3(f2)
        f4 = self.context(self.stage4(f3))
        features = self.up2(self.up1(f4, f3), f2)
        heatmap = torch.sigmoid(self.heatmap_head(features))
        return heatmap, self.size_head(features), self.offset_head(features)


def build_detector(config: DetectorConfig, seed: int) -> KeypointDetector:
    """Deterministically initialised detector"""
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = KeypointDetector(config)
    finally:
        torch.random.set_rng_state(generator_state)
    return model.eval()


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def check_image(image: np.ndarray, input_size: int) -> np.ndarray:
    """Validate an H x W x 3 image with values in [0, 1]"""
    image = np.asarray(image)
    if image.shape != (input_size, input_size, 3):
        raise ValidationError(
            f"Expected image of shape ({input_size}, {input_size}, 3), got {image.shape}"
        )
    if not np.isfinite(image).all() or image.min() < 0 or image.max() > 1:
        raise ValidationError("Image pixels must lie in [0, 1]")
    return image


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array -> (1, 3, H, W) tensor"""
    return torch.as_tensor(np.ascontiguousarray(image)).to(dtype).permute(2, 0, 1).unsqueeze(0)


def to_channels_last(tensor: torch.Tensor) -> np.ndarray:
    """(1, K, h, w) map -> h x w x K array"""
    return tensor.detach().squeeze(0).permute(1, 2, 0).cpu().numpy()


@torch.no_grad()
def infer(model: KeypointDetector, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Heatmap, size map and offset map for one image, channels last"""
    check_image(image, model.config.input_size)
    heatmap, size_map, offset_map = model(to_tensor(image, dtype=model_dtype(model)))
    return to_channels_last(heatmap), to_channels_last(size_map), to_channels_last(offset_map)


def find_peaks(heatmap: np.ndarray, threshold: float) -> List[Tuple[int, int, int, float]]:
    """Strict 3x3 local maxima >= threshold as (w, h, category, score), best first"""
    if heatmap.size == 0:
        return []
    footprint = np.ones((3, 3, 1), dtype=bool)
    footprint[1, 1, 0] = False
    neighbor_max = maximum_filter(heatmap, footprint=footprint, mode='constant', cval=-np.inf)
    peaks = (heatmap > neighbor_max) & (heatmap >= threshold)
    hs, ws, cs = np.nonzero(peaks)
    scores = heatmap[hs, ws, cs]
    order = np.lexsort((ws, hs, cs, -scores))
    return [(int(ws[i]), int(hs[i]), int(cs[i]), float(scores[i])) for i in order]


def decode_detections(
    heatmap: np.ndarray,
    size_map: np.ndarray,
    offset_map: np.ndarray,
    threshold: float,
    downsample_ratio: int = 4,
    input_size: int = None,
    max_detections: int = 32,
    image_id: str = "",
) -> DetectionSet:
    """Boxes at strict 3x3 heatmap peaks, reconstructed from size and offset"""
    if heatmap.shape[:2] != size_map.shape[:2] or heatmap.shape[:2] != offset_map.shape[:2]:
        raise ValidationError("heatmap, size_map and offset_map must share spatial dims")
    if input_size is None:
        input_size = heatmap.shape[0] * downsample_ratio

    detections = []
    for w, h, category, score in find_peaks(heatmap, threshold):
        if len(detections) >= max_detections:
            break
        box_w = max(float(size_map[h, w, 0]), 1.0)
        box_h = max(float(size_map[h, w, 1]), 1.0)
        cx = (w + float(offset_map[h, w, 0])) * downsample_ratio
        cy = (h + float(offset_map[h, w, 1])) * downsample_ratio
        x_min = min(max(cx - box_w / 2, 0.0), float(input_size))
        y_min = min(max(cy - box_h / 2, 0.0), float(input_size))
        x_max = min(max(cx + box_w / 2, 0.0), float(input_size))
        y_max = min(max(cy + box_h / 2, 0.0), float(input_size))
        if x_max <= x_min or y_max <= y_min:
            continue
        detections.append(Detection(
            box=(x_min, y_min, x_max, y_max),
            category=category,
            score=score,
            center_point=(w, h),
        ))
    return DetectionSet(detections=detections, source_image_id=image_id)


def detect(model: KeypointDetector, image: np.ndarray, image_id: str = "",
           threshold: float = None) -> DetectionSet:
    """Run the detector and decode its output"""
    config = model.config
    heatmap, size_map, offset_map = infer(model, image)
    return decode_detections(
        heatmap, size_map, offset_map,
        threshold=config.peak_threshold if threshold is None else threshold,
        downsample_ratio=config.downsample_ratio,
        input_size=config.input_size,
        max_detections=config.max_detections,
        image_id=image_id,
    )


def category_at_point(heatmap: np.ndarray, point: Tuple[int, int]) -> Tuple[int, float]:
    """Highest-confidence class at heatmap point (w, h); ties go to the lowest index"""
    w, h = point
    height, width = heatmap.shape[:2]
    if not (0 <= w < width and 0 <= h < height):
        raise ValidationError(f"Point {point} outside heatmap of size {width}x{height}")
    channels = heatmap[h, w]
    category = int(np.argmax(channels))
    return category, float(channels[category])


def receptive_field_radius(config: DetectorConfig) -> int:
    """Largest Chebyshev distance, in input pixels, from a cell's mask center to a pixel it depends on.

    The pooled bottleneck context makes every cell depend on the whole
    image, so this is the distance from the corner cell to the far border.
    """
    return config.input_size - 1 - config.downsample_ratio // 2


def finite_difference_check(
    model: KeypointDetector,
    image: np.ndarray,
    pixels: Sequence[Tuple[int, int, int]],
    step: float = 1e-3,
    floor: float = 1e-4,
) -> np.ndarray:
    """Relative errors between backprop and central differences of the summed heatmap.

    ``pixels`` holds (row, column, channel) triples. Runs in float64 on a copy
    of the model.
    """
    reference = copy.deepcopy(model).double().eval()

    def summed_heatmap(x: torch.Tensor) -> torch.Tensor:
        return reference(x)[0].sum()

    x = to_tensor(image, dtype=torch.float64).requires_grad_(True)
    (gradient,) = torch.autograd.grad(summed_heatmap(x), x)

    errors = []
    with torch.no_grad():
        for row, col, ch in pixels:
            plus = x.detach().clone()
            minus = x.detach().clone()
            plus[0, ch, row, col] += step
            minus[0, ch, row, col] -= step
            numeric = (summed_heatmap(plus) - summed_heatmap(minus)).item() / (2 * step)
            analytic = gradient[0, ch, row, col].item()
            scale = max(abs(analytic), abs(numeric), floor)
            errors.append(abs(analytic - numeric) / scale)
    result = np.asarray(errors, dtype=np.float64)
    if result.size:
        logger.debug("Finite-difference check: max relative error %.3e", result.max())
    return result


def gaussian_radius_sigma(width_px: float, height_px: float, downsample_ratio: int) -> float:
    """Splat sigma in heatmap cells: max(1, object diagonal / 6)"""
    diagonal = math.hypot(width_px, height_px) / downsample_ratio
    return max(1.0, diagonal / 6.0)
