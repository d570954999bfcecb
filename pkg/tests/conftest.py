import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

TOOLKIT_DIR = Path(__file__).resolve().parent.parent / "toolkit"
sys.path.insert(0, str(TOOLKIT_DIR))

from detector import build_detector, infer  # noqa: E402
from models import AttackConfig, DetectorConfig, TrainConfig  # noqa: E402
from shapes_dataset import generate_scene, write_dataset, write_splits  # noqa: E402
from trainer import DetectorTrainer  # noqa: E402

SMALL_SIZE = 64


@pytest.fixture
def small_config():
    return DetectorConfig(input_size=SMALL_SIZE, channels=[8, 16, 16, 16])


@pytest.fixture
def untrained_model(small_config):
    return build_detector(small_config, seed=0)


@pytest.fixture
def scene():
    image, ground_truth = generate_scene(3, SMALL_SIZE)
    return image, ground_truth


@pytest.fixture
def scene_image(scene):
    return scene[0]


@pytest.fixture
def tiny_dataset(tmp_path):
    return write_dataset(tmp_path / "tiny", 6, 0, SMALL_SIZE)


@pytest.fixture
def attack_config_for():
    """AttackConfig whose detection threshold selects the strongest peak of an untrained model"""
    def factory(model, image, **overrides):
        heatmap, _, _ = infer(model, image)
        top = float(heatmap.max())
        values = dict(
            peak_threshold=top * 0.999,
            refresh_threshold=top * 0.5,
            max_iterations=5,
            attack_radius=4,
        )
        values.update(overrides)
        return AttackConfig(**values)
    return factory


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Reduced detector trained on a small 64 px split"""
    root = tmp_path_factory.mktemp("trained")
    splits = write_splits(root, 240, 24, seed=11, image_size=SMALL_SIZE)
    detector_config = DetectorConfig(input_size=SMALL_SIZE, channels=[8, 16, 32, 32])
    train_config = TrainConfig(epochs=12, batch_size=16, learning_rate=3e-3, map_gate=0.0, seed=0)
    result = DetectorTrainer(detector_config, train_config).train(splits["train"], splits["test"])
    return SimpleNamespace(
        root=root,
        model=result.model,
        result=result,
        train_set=splits["train"],
        test_set=splits["test"],
        detector_config=detector_config,
        train_config=train_config,
    )
