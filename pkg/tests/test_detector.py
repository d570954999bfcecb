import numpy as np
import pytest
import torch

from detector import (build_detector, category_at_point, check_image, decode_detections, detect,
                      find_peaks, finite_difference_check, infer, receptive_field_radius, to_tensor)
from models import DetectorConfig
from utils import ValidationError


def _maps(size=32, classes=3):
    return (
        np.zeros((size, size, classes), dtype=np.float32),
        np.zeros((size, size, 2), dtype=np.float32),
        np.zeros((size, size, 2), dtype=np.float32),
    )


class TestDecode:

    def test_single_peak_decodes_to_centered_box(self):
        heatmap, size_map, offset_map = _maps()
        heatmap[5, 5, 0] = 0.9
        size_map[5, 5] = (8.0, 8.0)

        result = decode_detections(heatmap, size_map, offset_map, threshold=0.3)

        assert len(result) == 1
        detection = result.detections[0]
        assert detection.box == pytest.approx((16.0, 16.0, 24.0, 24.0))
        assert detection.category == 0
        assert detection.score == pytest.approx(0.9)
        assert detection.center_point == (5, 5)

    def test_offset_shifts_center(self):
        heatmap, size_map, offset_map = _maps()
        heatmap[2, 7, 1] = 0.8
        size_map[2, 7] = (6.0, 10.0)
        offset_map[2, 7] = (0.5, 0.25)

        detection = decode_detections(heatmap, size_map, offset_map, threshold=0.3).detections[0]

        cx, cy = (7 + 0.5) * 4, (2 + 0.25) * 4
        assert detection.box == pytest.approx((cx - 3, cy - 5, cx + 3, cy + 5))

    def test_empty_heatmap_gives_no_detections(self):
        assert len(decode_detections(*_maps(), threshold=0.3)) == 0

    def test_below_threshold_is_ignored(self):
        heatmap, size_map, offset_map = _maps()
        heatmap[5, 5, 0] = 0.2
        size_map[5, 5] = (8.0, 8.0)
        assert len(decode_detections(heatmap, size_map, offset_map, threshold=0.3)) == 0

    def test_faint_distant_background_does_not_change_detections(self):
        heatmap, size_map, offset_map = _maps()
        heatmap[5, 5, 0] = 0.9
        size_map[5, 5] = (8.0, 8.0)
        before = decode_detections(heatmap, size_map, offset_map, threshold=0.3)

        far = np.ones((32, 32), dtype=bool)
        far[:12, :12] = False
        heatmap[far] += 0.1
        after = decode_detections(heatmap, size_map, offset_map, threshold=0.3)

        assert [(d.category, d.box, d.score) for d in after] == [(d.category, d.box, d.score) for d in before]

    def test_sorted_by_score_and_capped(self):
        heatmap, size_map, offset_map = _maps()
        size_map[:] = 8.0
        for i, score in enumerate([0.4, 0.9, 0.6, 0.7]):
            heatmap[4 * i + 2, 4 * i + 2, i % 3] = score

        result = decode_detections(heatmap, size_map, offset_map, threshold=0.3, max_detections=3)

        assert [d.score for d in result] == pytest.approx([0.9, 0.7, 0.6])

    def test_boxes_are_clamped_to_image(self):
        heatmap, size_map, offset_map = _maps()
        heatmap[0, 0, 2] = 0.9
        size_map[0, 0] = (20.0, 20.0)
        box = decode_detections(heatmap, size_map, offset_map, threshold=0.3).detections[0].box
        assert box[0] == 0.0 and box[1] == 0.0
        assert box[2] == pytest.approx(10.0)

    def test_mismatched_maps_rejected(self):
        heatmap, size_map, offset_map = _maps()
        with pytest.raises(ValidationError):
            decode_detections(heatmap, size_map[:16], offset_map, threshold=0.3)


class TestPeaks:

    def test_plateau_is_not_a_strict_maximum(self):
        heatmap = np.zeros((8, 8, 1), dtype=np.float32)
        heatmap[3, 3, 0] = heatmap[3, 4, 0] = 0.8
        assert find_peaks(heatmap, 0.3) == []

    def test_peaks_are_per_channel(self):
        heatmap = np.zeros((8, 8, 2), dtype=np.float32)
        heatmap[3, 3, 0] = 0.8
        heatmap[3, 3, 1] = 0.5
        assert [(w, h, c) for w, h, c, _ in find_peaks(heatmap, 0.3)] == [(3, 3, 0), (3, 3, 1)]

    def test_category_at_point_prefers_lowest_index_on_tie(self):
        heatmap = np.zeros((4, 4, 3), dtype=np.float32)
        heatmap[1, 2] = (0.2, 0.7, 0.7)
        assert category_at_point(heatmap, (2, 1)) == (1, pytest.approx(0.7))

    def test_category_at_point_out_of_bounds(self):
        with pytest.raises(ValidationError):
            category_at_point(np.zeros((4, 4, 3)), (4, 0))


class TestNetwork:

    def test_output_shapes(self, untrained_model, scene_image):
        heatmap, size_map, offset_map = infer(untrained_model, scene_image)
        assert heatmap.shape == (16, 16, 3)
        assert size_map.shape == (16, 16, 2)
        assert offset_map.shape == (16, 16, 2)
        assert heatmap.min() > 0 and heatmap.max() < 1

    def test_forward_is_deterministic(self, untrained_model, scene_image):
        first = infer(untrained_model, scene_image)
        second = infer(untrained_model, scene_image)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_wrong_input_shape_rejected(self, untrained_model):
        with pytest.raises(ValidationError):
            untrained_model(torch.zeros(1, 3, 32, 32))
        with pytest.raises(ValidationError):
            infer(untrained_model, np.zeros((64, 64, 4), dtype=np.float32))

    def test_pixels_outside_unit_range_rejected(self):
        with pytest.raises(ValidationError):
            check_image(np.full((64, 64, 3), 1.5), 64)

    def test_build_is_deterministic_and_preserves_global_rng(self, small_config):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        first = build_detector(small_config, seed=5)
        after = torch.rand(3)
        second = build_detector(small_config, seed=5)

        assert torch.equal(expected, after)
        for a, b in zip(first.state_dict().values(), second.state_dict().values()):
            assert torch.equal(a, b)

    def test_detect_uses_config_threshold(self, untrained_model, scene_image):
        assert len(detect(untrained_model, scene_image, threshold=0.999)) == 0

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValidationError):
            DetectorConfig(downsample_ratio=8)
        with pytest.raises(ValidationError):
            DetectorConfig(input_size=72)
        with pytest.raises(ValidationError):
            DetectorConfig(channels=[8, 16])


class TestGradients:

    def test_backprop_matches_central_differences(self, untrained_model, scene_image):
        rng = np.random.default_rng(0)
        pixels = [(int(r), int(c), int(ch)) for r, c, ch in
                  zip(rng.integers(0, 64, 10), rng.integers(0, 64, 10), rng.integers(0, 3, 10))]
        errors = finite_difference_check(untrained_model, scene_image, pixels)
        assert errors.shape == (10,)
        assert errors.max() < 1e-2

    def test_check_does_not_modify_model(self, untrained_model, scene_image):
        before = {k: v.clone() for k, v in untrained_model.state_dict().items()}
        finite_difference_check(untrained_model, scene_image, [(0, 0, 0)])
        assert next(untrained_model.parameters()).dtype == torch.float32
        for key, value in untrained_model.state_dict().items():
            assert torch.equal(value, before[key])

    def test_receptive_field_radius_of_default_architecture(self):
        assert receptive_field_radius(DetectorConfig()) == 125

    def test_heatmap_cell_depends_on_the_whole_image(self, untrained_model, small_config):
        image = np.random.default_rng(1).random((64, 64, 3))
        x = to_tensor(image, dtype=torch.float64).requires_grad_(True)
        heatmap, _, _ = untrained_model.double()(x)
        (gradient,) = torch.autograd.grad(heatmap[0, :, 0, 0].sum(), x)

        radius = receptive_field_radius(small_config)
        center = small_config.downsample_ratio // 2
        assert center + radius == small_config.input_size - 1
        assert gradient[0, :, -1, -1].abs().sum().item() > 0.0
        assert (gradient != 0).double().mean().item() > 0.99
