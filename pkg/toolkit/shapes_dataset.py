"""
Deterministic synthetic scenes: circles, squares and triangles on a
blocky noise background, with on-disk persistence.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from PIL import Image

from models import BackgroundSpec, GroundTruthObject, SceneObject, SceneSpec, ShapeClass
from utils import DatasetFormatError, ValidationError, derive_seed, parse_json_line

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_OBJECTS = 5
TEST_SEED_OFFSET = 1_000_000


def _size_range(image_size: int) -> Tuple[int, int]:
    """Half-size range of objects in pixels"""
    low = max(4, image_size // 16)
    high = max(low + 1, image_size * 5 // 32)
    return low, high


def sample_scene_spec(seed: int, image_size: int = 128) -> SceneSpec:
    """Scene layout for a seed, without rasterizing"""
    if seed < 0:
        raise ValidationError(f"Scene seeds must be non-negative, got {seed}")
    rng = np.random.default_rng(seed)
    background = BackgroundSpec(
        base_color=tuple(int(v) for v in rng.integers(0, 90, size=3)),
        noise_amplitude=int(rng.integers(8, 40)),
        cell_size=int(rng.choice([2, 4, 8])),
    )

    n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    low, high = _size_range(image_size)
    objects: List[SceneObject] = []
    for _ in range(50 * n_objects):
        if len(objects) == n_objects:
            break
        shape = ShapeClass(int(rng.integers(0, len(ShapeClass))))
        half = int(rng.integers(low, high + 1))
        cx = int(rng.integers(half, image_size - half))
        cy = int(rng.integers(half, image_size - half))
        color = tuple(int(v) for v in rng.integers(150, 256, size=3))
        size = 2 * half
        if all(
            np.hypot(cx - o.center[0], cy - o.center[1]) >= max(size, o.size) / 2
            for o in objects
        ):
            objects.append(SceneObject(shape=shape, center=(cx, cy), size=size, color=color))

    return SceneSpec(seed=seed, image_size=image_size, objects=objects, background=background)


def shape_mask(obj: SceneObject, image_size: int) -> np.ndarray:
    """Integer-grid membership of one object, no anti-aliasing"""
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    dx = xx - obj.center[0]
    dy = yy - obj.center[1]
    half = obj.size // 2
    if obj.shape is ShapeClass.CIRCLE:
        return dx * dx + dy * dy <= half * half
    if obj.shape is ShapeClass.SQUARE:
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # apex up, base on the bottom edge of the box
    return (np.abs(dy) <= half) & (2 * np.abs(dx) <= dy + half)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to an 8-bit H x W x 3 array"""
    size = spec.image_size
    bg = spec.background
    rng = np.random.default_rng((spec.seed, 7))

    cells = -(-size // bg.cell_size)
    coarse = rng.integers(-bg.noise_amplitude, bg.noise_amplitude + 1, size=(cells, cells, 3))
    coarse = np.repeat(np.repeat(coarse, bg.cell_size, axis=0), bg.cell_size, axis=1)[:size, :size]
    fine = rng.integers(-4, 5, size=(size, size, 3))
    canvas = np.clip(np.asarray(bg.base_color)[None, None, :] + coarse + fine, 0, 255).astype(np.uint8)

    for obj in spec.objects:
        canvas[shape_mask(obj, size)] = np.asarray(obj.color, dtype=np.uint8)
    return canvas


def generate_scene(seed: int, image_size: int = 128) -> Tuple[np.ndarray, List[GroundTruthObject]]:
    """Image in [0, 1] and its ground truth, deterministic in the seed"""
    spec = sample_scene_spec(seed, image_size)
    image = render_scene(spec).astype(np.float32) / 255.0
    return image, [obj.to_ground_truth() for obj in spec.objects]


class ShapesDataset:
    """Handle on a dataset directory: images/, annotations.jsonl, manifest.json"""

    def __init__(self, directory: Union[str, Path], manifest: Dict, records: List[Dict]):
        self.directory = Path(directory)
        self.manifest = manifest
        self.records = records

    @property
    def image_size(self) -> int:
        return int(self.manifest["image_size"])

    @property
    def class_names(self) -> List[str]:
        return list(self.manifest["class_names"])

    @property
    def image_ids(self) -> List[str]:
        return [record["image_id"] for record in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, index: int) -> Path:
        return self.directory / "images" / self.records[index]["file_name"]

    def load_image(self, index: int) -> np.ndarray:
        path = self.image_path(index)
        try:
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as e:
            raise DatasetFormatError(path, None, f"cannot read image: {e}") from e
        return pixels.astype(np.float32) / 255.0

    def ground_truth(self, index: int) -> List[GroundTruthObject]:
        return [
            GroundTruthObject(
                category=int(obj["category"]),
                center=(float(obj["center"][0]), float(obj["center"][1])),
                size=(float(obj["size"][0]), float(obj["size"][1])),
            )
            for obj in self.records[index]["objects"]
        ]

    def __getitem__(self, index: int) -> Tuple[str, np.ndarray, List[GroundTruthObject]]:
        return self.records[index]["image_id"], self.load_image(index), self.ground_truth(index)


def write_dataset(directory: Union[str, Path], n: int, seed0: int, image_size: int = 128) -> ShapesDataset:
    """Render n scenes with seeds seed0 .. seed0 + n - 1"""
    directory = Path(directory)
    image_dir = directory / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    for stale in image_dir.glob("*.png"):
        stale.unlink()

    records = []
    for i in range(n):
        seed = seed0 + i
        spec = sample_scene_spec(seed, image_size)
        image_id = f"{i:05d}"
        file_name = f"{image_id}.png"
        Image.fromarray(render_scene(spec)).save(image_dir / file_name, format="PNG")
        records.append({
            "image_id": image_id,
            "file_name": file_name,
            "seed": seed,
            "objects": [obj.to_ground_truth().to_dict() for obj in spec.objects],
        })

    with open(directory / "annotations.jsonl", "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed0": seed0,
        "n": n,
        "image_size": image_size,
        "class_names": ShapeClass.names(),
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    logger.info(f"Wrote {n} scenes to {directory} (seed0={seed0})")
    return ShapesDataset(directory, manifest, records)


def _validate_record(record: Dict, path: Path, lineno: int) -> None:
    for key in ("image_id", "file_name", "objects"):
        if key not in record:
            raise DatasetFormatError(path, lineno, f"missing field {key!r}")
    if not isinstance(record["objects"], list):
        raise DatasetFormatError(path, lineno, "'objects' must be a list")
    for obj in record["objects"]:
        try:
            category = int(obj["category"])
            center = [float(v) for v in obj["center"]]
            size = [float(v) for v in obj["size"]]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(path, lineno, f"malformed object {obj!r}: {e}") from e
        if category < 0 or len(center) != 2 or len(size) != 2 or min(size) <= 0:
            raise DatasetFormatError(path, lineno, f"invalid object {obj!r}")


def read_dataset(directory: Union[str, Path]) -> ShapesDataset:
    """Open a dataset written by write_dataset"""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    annotations_path = directory / "annotations.jsonl"
    if not manifest_path.is_file():
        raise DatasetFormatError(manifest_path, None, "missing dataset manifest")
    if not annotations_path.is_file():
        raise DatasetFormatError(annotations_path, None, "missing annotation file")

    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(manifest_path, e.lineno, f"invalid JSON: {e.msg}") from e
    for key in ("format_version", "n", "image_size", "class_names"):
        if key not in manifest:
            raise DatasetFormatError(manifest_path, None, f"missing field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(
            manifest_path, None, f"unsupported format version {manifest['format_version']}"
        )

    records = []
    with open(annotations_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            record = parse_json_line(line)
            if record is None:
                raise DatasetFormatError(annotations_path, lineno, "not a JSON object")
            _validate_record(record, annotations_path, lineno)
            records.append(record)

    if len(records) != int(manifest["n"]):
        raise DatasetFormatError(
            annotations_path, len(records) + 1,
            f"expected {manifest['n']} records, found {len(records)}",
        )
    return ShapesDataset(directory, manifest, records)


def resolve_split(directory: Union[str, Path], split: str) -> Path:
    """`directory/split` when it is a dataset, else `directory` itself"""
    directory = Path(directory)
    candidate = directory / split
    if (candidate / "manifest.json").is_file():
        return candidate
    return directory


def dataset_hash(directory: Union[str, Path]) -> str:
    """Content hash over annotations and the image files they list"""
    dataset = read_dataset(directory)
    digest = hashlib.sha256()
    digest.update((dataset.directory / "annotations.jsonl").read_bytes())
    for file_name in sorted(record["file_name"] for record in dataset.records):
        digest.update(file_name.encode())
        digest.update((dataset.directory / "images" / file_name).read_bytes())
    return digest.hexdigest()


def write_splits(directory: Union[str, Path], n_train: int, n_test: int, seed: int,
                 image_size: int = 128) -> Dict[str, ShapesDataset]:
    """Train and held-out test splits with disjoint seed ranges"""
    directory = Path(directory)
    return {
        "train": write_dataset(directory / "train", n_train, seed, image_size),
        "test": write_dataset(directory / "test", n_test, derive_seed(seed, TEST_SEED_OFFSET), image_size),
    }


def load_split(directory: Union[str, Path], split: str) -> ShapesDataset:
    return read_dataset(resolve_split(directory, split))
