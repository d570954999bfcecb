import copy
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from detector import decode_detections, infer, receptive_field_radius
from fla_attack import (category_gradient, category_loss, expand_neighbors, fla_step, generate_mask,
                        heatmap_category_loss, normalize_linf, partition_by_category, refresh_points,
                        run_fla, select_target_points)
from models import AttackConfig, DetectorConfig, TargetPoint, TargetPointSet
from utils import ValidationError


def _points(*specs):
    return TargetPointSet(TargetPoint(coords=c, category=k) for c, k in specs)


def _heatmap_tensor(values, size=8, channels=3):
    """(1, C, size, size) tensor filled with 0.5 and the given {(w, h, c): value}"""
    heatmap = torch.full((1, channels, size, size), 0.5, dtype=torch.float64)
    for (w, h, c), value in values.items():
        heatmap[0, c, h, w] = value
    return heatmap


def _interior_image(seed, size=64):
    return 0.2 + 0.6 * np.random.default_rng(seed).random((size, size, 3))


class OpposedDetector(nn.Module):
    """Two channels whose category losses have exactly opposite gradients"""

    def __init__(self):
        super().__init__()
        self.config = DetectorConfig(input_size=16, channels=[4, 4, 4, 4], num_classes=2)
        self.anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        t = (x - 0.5).sum() + self.anchor[0]
        cells = torch.ones(1, 1, 4, 4, dtype=x.dtype)
        heatmap = torch.cat([torch.sigmoid(t) * cells, torch.sigmoid(-t) * cells], dim=1)
        zeros = torch.zeros(1, 2, 4, 4, dtype=x.dtype)
        return heatmap, zeros, zeros


class PersistentDetector(nn.Module):
    """One keypoint whose activation stays near 1 under any bounded perturbation"""

    def __init__(self):
        super().__init__()
        self.config = DetectorConfig(input_size=16, channels=[4, 4, 4, 4], num_classes=2)
        self.anchor = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        t = 10.0 + 1e-3 * x.sum() + self.anchor[0]
        pattern = torch.full((1, 1, 4, 4), 0.05, dtype=x.dtype)
        pattern[0, 0, 1, 1] = 1.0
        heatmap = torch.cat([torch.sigmoid(t) * pattern, torch.zeros_like(pattern)], dim=1)
        zeros = torch.zeros(1, 2, 4, 4, dtype=x.dtype)
        return heatmap, zeros, zeros


class TestSelection:

    def test_all_zero_heatmap_has_no_targets(self):
        assert len(select_target_points(np.zeros((16, 16, 3)), 0.3)) == 0

    def test_single_peak(self):
        heatmap = np.zeros((16, 16, 3))
        heatmap[5, 5, 2] = 0.9
        points = select_target_points(heatmap, 0.3)
        assert points == _points(((5, 5), 2))

    def test_targets_match_decoded_centers(self, untrained_model, scene_image):
        heatmap, size_map, offset_map = infer(untrained_model, scene_image)
        threshold = float(heatmap.max()) * 0.9
        points = select_target_points(heatmap, threshold)
        detections = decode_detections(heatmap, size_map, offset_map, threshold, max_detections=1000)

        assert len(points) > 0
        assert [(p.coords, p.category) for p in points] == \
            [(d.center_point, d.category) for d in detections]


class TestNeighbors:

    def test_empty_stays_empty(self):
        assert len(expand_neighbors(TargetPointSet(), 1, (16, 16))) == 0

    def test_interior_point_gives_three_by_three(self):
        expanded = expand_neighbors(_points(((5, 5), 1)), 1, (16, 16))
        assert len(expanded) == 9
        assert {p.category for p in expanded} == {1}
        assert sorted(p.coords for p in expanded) == [(w, h) for w in (4, 5, 6) for h in (4, 5, 6)]

    def test_corner_point_is_clamped(self):
        assert len(expand_neighbors(_points(((0, 0), 0)), 1, (16, 16))) == 4

    def test_overlapping_balls_are_deduplicated(self):
        expanded = expand_neighbors(_points(((5, 5), 0), ((6, 5), 0)), 1, (16, 16))
        assert len(expanded) == 12

    def test_same_cell_different_category_kept_apart(self):
        expanded = expand_neighbors(_points(((5, 5), 0), ((5, 5), 1)), 0, (16, 16))
        assert len(expanded) == 2

    def test_seed_points_keep_their_flag(self):
        expanded = expand_neighbors(_points(((5, 5), 0)), 1, (16, 16))
        assert TargetPoint((5, 5), 0) in expanded
        assert sum(not p.is_neighbor for p in expanded) == 1


class TestPartition:

    def test_empty(self):
        assert partition_by_category(TargetPointSet()) == {}

    def test_example(self):
        partition = partition_by_category(_points(((1, 1), 0), ((2, 2), 0), ((3, 3), 2)))
        assert sorted(partition) == [0, 2]
        assert partition[0] == _points(((1, 1), 0), ((2, 2), 0))
        assert partition[2] == _points(((3, 3), 2))

    def test_sizes_sum_to_total_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            points = TargetPointSet(
                TargetPoint((int(w), int(h)), int(c))
                for w, h, c in rng.integers(0, [8, 8, 3], size=(int(rng.integers(0, 30)), 3))
            )
            partition = partition_by_category(points)
            assert sum(len(subset) for subset in partition.values()) == len(points)
            for category, subset in partition.items():
                assert all(p.category == category for p in subset)


class TestCategoryLoss:

    def test_full_activation_has_zero_loss(self):
        heatmap = _heatmap_tensor({(1, 1, 0): 1.0})
        assert heatmap_category_loss(heatmap, _points(((1, 1), 0)), 0).item() == 0.0

    def test_sum_of_negative_logs(self):
        heatmap = _heatmap_tensor({(1, 1, 2): math.exp(-1), (4, 3, 2): math.exp(-2)})
        loss = heatmap_category_loss(heatmap, _points(((1, 1), 2), ((4, 3), 2)), 2)
        assert loss.item() == pytest.approx(3.0)

    def test_zero_activation_is_clamped(self):
        heatmap = _heatmap_tensor({(1, 1, 0): 0.0})
        loss = heatmap_category_loss(heatmap, _points(((1, 1), 0)), 0)
        assert loss.item() == pytest.approx(-math.log(1e-12))

    def test_empty_or_mixed_points_rejected(self):
        heatmap = _heatmap_tensor({})
        with pytest.raises(ValidationError):
            heatmap_category_loss(heatmap, TargetPointSet(), 0)
        with pytest.raises(ValidationError):
            heatmap_category_loss(heatmap, _points(((1, 1), 0), ((2, 2), 1)), 0)

    def test_out_of_bounds_point_rejected(self):
        with pytest.raises(ValidationError):
            heatmap_category_loss(_heatmap_tensor({}), _points(((8, 0), 0)), 0)

    def test_loss_falls_when_activation_rises(self, untrained_model):
        model = copy.deepcopy(untrained_model).double()
        image = _interior_image(0)
        points = _points(((7, 7), 1))
        gradient = category_gradient(model, image, points, 1)
        lowered = image - 1e-3 * gradient / np.abs(gradient).max()
        assert category_loss(model, lowered, points, 1) < category_loss(model, image, points, 1)


class TestCategoryGradient:

    def test_shape_matches_image(self, untrained_model, scene_image):
        gradient = category_gradient(untrained_model, scene_image, _points(((3, 3), 0)), 0)
        assert gradient.shape == scene_image.shape

    def test_matches_central_differences(self, untrained_model):
        model = copy.deepcopy(untrained_model).double()
        image = _interior_image(1)
        points = _points(((6, 6), 0), ((9, 7), 0))
        gradient = category_gradient(model, image, points, 0)

        rng = np.random.default_rng(2)
        step = 1e-5
        for row, col, ch in zip(rng.integers(8, 48, 10), rng.integers(8, 48, 10), rng.integers(0, 3, 10)):
            plus, minus = image.copy(), image.copy()
            plus[row, col, ch] += step
            minus[row, col, ch] -= step
            numeric = (category_loss(model, plus, points, 0) - category_loss(model, minus, points, 0)) / (2 * step)
            analytic = gradient[row, col, ch]
            assert abs(analytic - numeric) <= 1e-2 * max(abs(analytic), abs(numeric), 1e-6)

    def test_reaches_pixels_far_from_the_points(self, untrained_model, small_config):
        gradient = category_gradient(untrained_model, _interior_image(3), _points(((0, 0), 2)), 2)
        limit = small_config.downsample_ratio // 2 + receptive_field_radius(small_config)
        assert limit == small_config.input_size - 1
        assert np.any(gradient[-8:, -8:, :] != 0)
        assert np.count_nonzero(gradient) > 0.99 * gradient.size


class TestNormalize:

    def test_example(self):
        np.testing.assert_array_equal(normalize_linf(np.array([2.0, -4.0])), [0.5, -1.0])

    def test_all_zero_unchanged(self):
        g = np.zeros((4, 4, 3))
        np.testing.assert_array_equal(normalize_linf(g), g)
        t = torch.zeros(2, 3)
        assert torch.equal(normalize_linf(t), t)

    def test_max_abs_is_exactly_one(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            g = rng.normal(scale=10 ** rng.uniform(-8, 3), size=(5, 5, 3))
            assert np.abs(normalize_linf(g)).max() == 1.0
            assert normalize_linf(torch.from_numpy(g)).abs().max().item() == 1.0


def _mask_oracle(coords, attack_radius, height, width, ratio):
    ys, xs = np.indices((height, width))
    mask = np.zeros((height, width), dtype=np.uint8)
    for w, h in coords:
        cx, cy = w * ratio + ratio // 2, h * ratio + ratio // 2
        mask[np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= attack_radius] = 1
    return mask


class TestMask:

    def test_empty_points_give_zero_mask(self):
        assert not generate_mask(TargetPointSet(), 4, (32, 32), 4).data.any()

    def test_single_point_example(self):
        mask = generate_mask(_points(((2, 3), 0)), 1, (32, 32), 4).data
        expected = np.zeros((32, 32), dtype=np.uint8)
        expected[13:16, 9:12] = 1
        np.testing.assert_array_equal(mask, expected)

    def test_huge_radius_saturates(self):
        mask = generate_mask(_points(((0, 0), 0)), 100, (32, 32), 4)
        assert mask.data.all()
        assert mask.area_fraction == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            count = int(rng.integers(0, 11))
            coords = [(int(w), int(h)) for w, h in rng.integers(0, 16, size=(count, 2))]
            radius = int(rng.integers(0, 20))
            points = TargetPointSet(TargetPoint(c, int(k)) for c, k in zip(coords, rng.integers(0, 3, count)))
            mask = generate_mask(points, radius, (64, 64), 4).data
            np.testing.assert_array_equal(mask, _mask_oracle(coords, radius, 64, 64, 4))

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ValidationError):
            generate_mask(TargetPointSet(), 1, (30, 32), 4)


class TestStep:

    def test_empty_points_rejected(self, untrained_model, scene_image):
        with pytest.raises(ValidationError):
            fla_step(untrained_model, scene_image, TargetPointSet(), AttackConfig())

    def test_sign_step_is_local_and_sized(self, untrained_model):
        config = AttackConfig(attack_radius=3, budget=0.1, max_iterations=10)
        image = _interior_image(6)
        points = _points(((4, 4), 0), ((10, 12), 2))
        next_image, row, mask = fla_step(untrained_model, image, points, config)

        change = np.abs(next_image - image)
        outside = mask.data == 0
        assert np.array_equal(next_image[outside], image[outside])
        assert np.all(np.isclose(change, 0.0) | np.isclose(change, config.step_size))
        assert change.max() > 0
        assert set(row.loss_sum) == {0, 2}
        assert all(v in (0.0, 1.0) for v in row.normalized_max_abs.values())
        assert row.mask_area_fraction == pytest.approx(mask.data.mean())

    def test_opposite_gradients_cancel(self):
        model = OpposedDetector().eval()
        image = np.full((16, 16, 3), 0.5)
        config = AttackConfig(attack_radius=100, budget=0.1, max_iterations=10)
        next_image, row, _ = fla_step(model, image, _points(((1, 1), 0), ((1, 1), 1)), config)

        assert row.normalized_max_abs == {0: 1.0, 1: 1.0}
        assert np.array_equal(next_image, image)


class TestRefresh:

    def test_untouched_image_keeps_points(self, untrained_model, scene_image):
        heatmap, _, _ = infer(untrained_model, scene_image)
        points = select_target_points(heatmap, float(heatmap.max()) * 0.9)
        assert refresh_points(untrained_model, scene_image, points, float(heatmap.max()) * 0.5) == points

    def test_high_threshold_removes_everything(self, untrained_model, scene_image):
        points = _points(((3, 3), 0), ((8, 8), 1))
        assert len(refresh_points(untrained_model, scene_image, points, 0.999)) == 0

    def test_never_adds_points(self, untrained_model, scene_image):
        points = _points(((3, 3), 0))
        assert len(refresh_points(untrained_model, scene_image, points, 0.01)) <= 1
        assert len(refresh_points(untrained_model, scene_image, TargetPointSet(), 0.01)) == 0


class TestRunFLA:

    def test_no_detections_gives_zero_perturbation(self, untrained_model, scene_image):
        perturbation, trace = run_fla(scene_image, untrained_model, AttackConfig(peak_threshold=0.999))
        assert perturbation.iterations_used == 0
        assert not perturbation.data.any()
        assert trace.success and trace.rows == []

    def test_locality_budget_and_monotone_targets(self, untrained_model, scene_image, attack_config_for):
        config = attack_config_for(untrained_model, scene_image, max_iterations=20, budget=0.1)
        perturbation, trace = run_fla(scene_image, untrained_model, config)

        assert 1 <= perturbation.iterations_used <= config.max_iterations
        assert len(trace.rows) == perturbation.iterations_used
        assert trace.union_mask.any()
        assert not perturbation.data[trace.union_mask == 0].any()
        assert perturbation.linf <= config.budget

        counts = [trace.initial_targets] + [row.remaining_targets for row in trace.rows]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        assert not trace.success or counts[-1] == 0

    def test_budget_is_exact_after_every_step_lands(self):
        config = AttackConfig(budget=16 / 255, max_iterations=50, attack_radius=16)
        perturbation, trace = run_fla(_interior_image(5, size=16), PersistentDetector(), config)

        assert perturbation.iterations_used == 50
        assert not trace.success
        assert np.abs(perturbation.data).max() <= config.budget
        assert np.abs(perturbation.data).min() == pytest.approx(config.budget)

    def test_normalized_gradients_have_unit_max(self, untrained_model, scene_image, attack_config_for):
        config = attack_config_for(untrained_model, scene_image, max_iterations=10)
        _, trace = run_fla(scene_image, untrained_model, config)
        for row in trace.rows:
            assert all(v in (0.0, 1.0) for v in row.normalized_max_abs.values())

    def test_deterministic(self, untrained_model, scene_image, attack_config_for):
        config = attack_config_for(untrained_model, scene_image)
        first, _ = run_fla(scene_image, untrained_model, config)
        second, _ = run_fla(scene_image, untrained_model, config)
        assert np.array_equal(first.data, second.data)

    def test_trace_exports_csv(self, untrained_model, scene_image, attack_config_for):
        _, trace = run_fla(scene_image, untrained_model, attack_config_for(untrained_model, scene_image))
        lines = trace.to_csv(3).strip().splitlines()
        assert lines[0].startswith("iteration,remaining_targets,mask_area_fraction,loss_sum_0")
        assert len(lines) == len(trace.rows) + 1

    @pytest.mark.slow
    def test_attack_suppresses_trained_detections(self, trained):
        image = None
        for index in range(len(trained.test_set)):
            candidate = trained.test_set.load_image(index)
            heatmap, _, _ = infer(trained.model, candidate)
            if len(select_target_points(heatmap, trained.detector_config.peak_threshold)):
                image = candidate
                break
        assert image is not None

        perturbation, trace = run_fla(image, trained.model, AttackConfig())
        assert trace.initial_targets > 0
        assert trace.rows[-1].remaining_targets < trace.initial_targets
        assert perturbation.linf <= AttackConfig().budget

    @pytest.mark.slow
    def test_success_leaves_every_attacked_point_below_refresh(self, trained):
        config = AttackConfig()
        threshold = config.peak_threshold_for(trained.detector_config)
        checked = 0
        for index in range(len(trained.test_set)):
            image = trained.test_set.load_image(index)
            heatmap, _, _ = infer(trained.model, image)
            seeds = select_target_points(heatmap, threshold)
            if not seeds:
                continue
            attacked = expand_neighbors(seeds, config.neighbor_radius, heatmap.shape[:2])

            perturbation, trace = run_fla(image, trained.model, config)
            if not trace.success:
                continue
            checked += 1
            adversarial = np.clip(image + perturbation.data, 0.0, 1.0)
            after, _, _ = infer(trained.model, adversarial)
            for point in attacked:
                w, h = point.coords
                assert after[h, w, point.category] < config.refresh_threshold
        assert checked > 0
