import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from config import ToolkitConfig
from utils import ValidationError


class ShapeClass(Enum):
    CIRCLE = 0
    SQUARE = 1
    TRIANGLE = 2

    @classmethod
    def names(cls) -> List[str]:
        return [member.name.lower() for member in cls]


class AttackKind(Enum):
    FLA = "fla"
    FGSM = "fgsm"
    PGD = "pgd"


class TransferVariant(Enum):
    JPEG = "jpeg"
    LOSSLESS = "lossless"


def _raise_if(errors: List[str], owner: str) -> None:
    if errors:
        raise ValidationError(f"Invalid {owner}:\n" + "\n".join(errors))


@dataclass
class DetectorConfig:
    input_size: int = ToolkitConfig.INPUT_SIZE
    downsample_ratio: int = ToolkitConfig.DOWNSAMPLE
    num_classes: int = ToolkitConfig.NUM_CLASSES
    channels: List[int] = field(default_factory=lambda: list(ToolkitConfig.CHANNELS))
    peak_threshold: float = ToolkitConfig.PEAK_THRESHOLD
    max_detections: int = ToolkitConfig.MAX_DETECTIONS

    def __post_init__(self):
        errors = []
        if self.input_size <= 0 or self.downsample_ratio <= 0:
            errors.append("input_size and downsample_ratio must be positive")
        elif self.input_size % self.downsample_ratio != 0:
            errors.append("input_size must be divisible by downsample_ratio")
        if self.downsample_ratio != 4:
            # four stride-2 stages followed by two upsampling stages
            errors.append("downsample_ratio must be 4 for this architecture")
        elif self.input_size % 16 != 0:
            errors.append("input_size must be divisible by 16")
        if self.num_classes < 1:
            errors.append("num_classes must be positive")
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            errors.append("channels must list 4 positive stage widths")
        if not (0 < self.peak_threshold < 1):
            errors.append("peak_threshold must be between 0 and 1")
        if self.max_detections < 1:
            errors.append("max_detections must be positive")
        _raise_if(errors, "DetectorConfig")

    @property
    def heatmap_size(self) -> int:
        return self.input_size // self.downsample_ratio


@dataclass
class AttackConfig:
    attack_radius: int = ToolkitConfig.ATTACK_RADIUS
    budget: float = ToolkitConfig.BUDGET
    max_iterations: int = ToolkitConfig.MAX_ITERATIONS
    neighbor_radius: int = ToolkitConfig.NEIGHBOR_RADIUS
    refresh_threshold: float = ToolkitConfig.REFRESH_THRESHOLD
    # None inherits the detector's peak threshold
    peak_threshold: Optional[float] = None
    jpeg_quality: int = ToolkitConfig.JPEG_QUALITY

    def __post_init__(self):
        errors = []
        if self.attack_radius < 0:
            errors.append("attack_radius must be >= 0")
        if self.budget <= 0:
            errors.append("budget must be > 0")
        if self.max_iterations < 1:
            errors.append("max_iterations must be >= 1")
        if self.neighbor_radius < 0:
            errors.append("neighbor_radius must be >= 0")
        if not (0 < self.refresh_threshold < 1):
            errors.append("refresh_threshold must be between 0 and 1")
        if self.peak_threshold is not None and not (0 < self.peak_threshold < 1):
            errors.append("peak_threshold must be between 0 and 1")
        if not (1 <= self.jpeg_quality <= 100):
            errors.append("jpeg_quality must be between 1 and 100")
        _raise_if(errors, "AttackConfig")

    @property
    def step_size(self) -> float:
        return self.budget / self.max_iterations

    def peak_threshold_for(self, detector_config: DetectorConfig) -> float:
        if self.peak_threshold is not None:
            return self.peak_threshold
        return detector_config.peak_threshold


@dataclass
class BaselineConfig:
    budget: float = ToolkitConfig.BUDGET
    step_size: float = ToolkitConfig.BUDGET / 10
    iterations: int = 10
    # None means the L-inf ball radius equals the budget
    projection_radius: Optional[float] = None

    def __post_init__(self):
        errors = []
        if self.budget <= 0:
            errors.append("budget must be > 0")
        if self.step_size <= 0:
            errors.append("step_size must be > 0")
        if self.iterations < 1:
            errors.append("iterations must be >= 1")
        if self.projection_radius is not None and self.projection_radius <= 0:
            errors.append("projection_radius must be > 0")
        _raise_if(errors, "BaselineConfig")

    @property
    def radius(self) -> float:
        return self.budget if self.projection_radius is None else self.projection_radius


@dataclass
class TrainConfig:
    epochs: int = ToolkitConfig.TRAIN_EPOCHS
    batch_size: int = ToolkitConfig.BATCH_SIZE
    learning_rate: float = ToolkitConfig.LEARNING_RATE
    map_gate: float = ToolkitConfig.MAP_GATE
    seed: int = ToolkitConfig.SEED
    size_weight: float = 0.1
    offset_weight: float = 1.0

    def __post_init__(self):
        errors = []
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be > 0")
        if not (0 <= self.map_gate <= 1):
            errors.append("map_gate must be between 0 and 1")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        _raise_if(errors, "TrainConfig")


@dataclass
class DatasetConfig:
    n_train: int = ToolkitConfig.N_TRAIN
    n_test: int = ToolkitConfig.N_TEST
    image_size: int = ToolkitConfig.INPUT_SIZE
    seed: int = ToolkitConfig.SEED

    def __post_init__(self):
        errors = []
        if self.n_train < 0 or self.n_test < 0:
            errors.append("n_train and n_test must be >= 0")
        if self.image_size < 32:
            errors.append("image_size must be at least 32")
        if self.seed < 0:
            errors.append("seed must be >= 0")
        _raise_if(errors, "DatasetConfig")


@dataclass
class GroundTruthObject:
    category: int
    center: Tuple[float, float]  # pixels (x, y)
    size: Tuple[float, float]  # pixels (w, h)

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValidationError(f"Ground-truth size must be positive, got {self.size}")

    @property
    def box(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center
        w, h = self.size
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def to_dict(self) -> Dict:
        return {
            "category": int(self.category),
            "class_name": ShapeClass(self.category).name.lower()
            if self.category < len(ShapeClass) else str(self.category),
            "center": [float(self.center[0]), float(self.center[1])],
            "size": [float(self.size[0]), float(self.size[1])],
        }


@dataclass
class BackgroundSpec:
    base_color: Tuple[int, int, int]
    noise_amplitude: int
    cell_size: int


@dataclass
class SceneObject:
    shape: ShapeClass
    center: Tuple[int, int]
    size: int
    color: Tuple[int, int, int]

    def to_ground_truth(self) -> GroundTruthObject:
        return GroundTruthObject(
            category=self.shape.value,
            center=(float(self.center[0]), float(self.center[1])),
            size=(float(self.size), float(self.size)),
        )


@dataclass
class SceneSpec:
    seed: int
    image_size: int
    objects: List[SceneObject]
    background: BackgroundSpec


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    category: int
    score: float
    center_point: Tuple[int, int]  # heatmap (w, h)

    def __post_init__(self):
        x_min, y_min, x_max, y_max = self.box
        if not (x_min < x_max and y_min < y_max):
            raise ValidationError(f"Degenerate detection box {self.box}")


@dataclass
class DetectionSet:
    detections: List[Detection]
    source_image_id: str = ""

    def __post_init__(self):
        scores = [d.score for d in self.detections]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("DetectionSet must be sorted by descending score")

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.detections)


@dataclass(frozen=True)
class TargetPoint:
    coords: Tuple[int, int]  # heatmap (w, h)
    category: int
    is_neighbor: bool = False

    @property
    def key(self) -> Tuple[Tuple[int, int], int]:
        return (self.coords, self.category)


class TargetPointSet:
    """Insertion-ordered set of target points, unique by (coords, category)"""

    def __init__(self, points: Iterable[TargetPoint] = ()):
        self._points: Dict[Tuple[Tuple[int, int], int], TargetPoint] = {}
        for point in points:
            self.add(point)

    def add(self, point: TargetPoint) -> bool:
        """Add a point unless its (coords, category) is already present"""
        if point.key in self._points:
            return False
        self._points[point.key] = point
        return True

    def categories(self) -> List[int]:
        return sorted({p.category for p in self._points.values()})

    def __len__(self) -> int:
        return len(self._points)

    def __iter__(self) -> Iterator[TargetPoint]:
        return iter(list(self._points.values()))

    def __contains__(self, point: object) -> bool:
        return isinstance(point, TargetPoint) and point.key in self._points

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TargetPointSet):
            return NotImplemented
        return set(self._points) == set(other._points)

    def __bool__(self) -> bool:
        return bool(self._points)

    def __repr__(self) -> str:
        return f"TargetPointSet({list(self._points.values())!r})"


@dataclass
class AttackMask:
    data: np.ndarray  # H x W, values 0 or 1

    @property
    def area_fraction(self) -> float:
        return float(self.data.mean()) if self.data.size else 0.0


@dataclass
class Perturbation:
    data: np.ndarray  # H x W x 3
    iterations_used: int = 0

    @property
    def linf(self) -> float:
        return float(np.abs(self.data).max()) if self.data.size else 0.0


@dataclass
class TraceRow:
    iteration: int
    remaining_targets: int
    loss_sum: Dict[int, float]
    normalized_max_abs: Dict[int, float]
    mask_area_fraction: float


@dataclass
class AttackTrace:
    rows: List[TraceRow] = field(default_factory=list)
    success: bool = False
    initial_targets: int = 0
    elapsed_seconds: float = 0.0
    union_mask: Optional[np.ndarray] = None

    def to_csv(self, num_classes: int) -> str:
        """Row-per-iteration CSV text"""
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        header = ["iteration", "remaining_targets", "mask_area_fraction"]
        header += [f"loss_sum_{c}" for c in range(num_classes)]
        header += [f"normalized_max_abs_{c}" for c in range(num_classes)]
        writer.writerow(header)
        for row in self.rows:
            values = [row.iteration, row.remaining_targets, f"{row.mask_area_fraction:.6f}"]
            values += [_fmt(row.loss_sum.get(c)) for c in range(num_classes)]
            values += [_fmt(row.normalized_max_abs.get(c)) for c in range(num_classes)]
            writer.writerow(values)
        return buffer.getvalue()


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


@dataclass
class MetricsReport:
    attack: str
    map_clean: float
    map_attack: float
    asr: float
    p_l2: float
    p_l0: float
    mean_attack_time: float
    num_images: int = 0
    mean_iterations: float = 0.0
    success_rate: float = 0.0
    jpeg_map_attack: Optional[float] = None
    jpeg_asr: Optional[float] = None
    atr: Optional[float] = None

    def __post_init__(self):
        errors = []
        if not (0 <= self.p_l0 <= 1):
            errors.append("p_l0 must be between 0 and 1")
        if self.map_clean > 0 and not math.isclose(
            self.asr, 1 - self.map_attack / self.map_clean, abs_tol=1e-9
        ):
            errors.append("asr must equal 1 - map_attack / map_clean")
        _raise_if(errors, "MetricsReport")

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict
    seeds: Dict[str, int]
    versions: Dict[str, str]
    timings: Dict[str, float] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)
    environment: Dict = field(default_factory=dict)
    created_at: float = field(default_factory=time.time)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)


@dataclass
class AttackOutcome:
    image_id: str
    perturbation: Perturbation
    adversarial: np.ndarray  # H x W x 3 in [0, 1]
    seconds: float
    trace: Optional[AttackTrace] = None
    jpeg_bytes: bytes = b""

    @property
    def iterations(self) -> int:
        return self.perturbation.iterations_used
