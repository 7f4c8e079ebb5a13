"""
半透明补丁测试：遮罩混合、显眼度、γ 课程与同等不透明度对照
"""
import math

import numpy as np
import pytest

from src.attack import (
    GammaSchedule, TransformSupport, TransparentConfig, apply_patch_opaque, blend_apply, detect_loss_spikes,
    gamma_step, image_relative_opacity, joint_loss, load_mask_bundle, make_opacity_matched_control,
    matched_control_scale, opacity_matched, optimize_opacity_matched_control, optimize_transparent,
    patch_obtrusiveness, sample_transform, save_mask_bundle, warp_patch
)
from src.attack.transparency import validate_mask
from src.diffcore import Tensor
from src.utils.errors import ConfigError, NonFiniteError, PlacementError, ShapeError

from .conftest import PATCH_SIZE

FIXED_SUPPORT = TransformSupport(theta_max=0.0, scale_low=0.5, scale_high=0.5)


def _transparent_config(**overrides) -> TransparentConfig:
    params = dict(iterations=4, learning_rate=5.0, batch_images=2, transforms_per_image=2,
                  patch_size=PATCH_SIZE, support=FIXED_SUPPORT, control_iterations=2, dtype="float64")
    params.update(overrides)
    return TransparentConfig(**params)


class TestObtrusiveness:

    def test_mean_of_mask(self):
        assert patch_obtrusiveness(np.full((1, 4, 4), 0.3)) == pytest.approx(0.3)
        mask = np.zeros((1, 4, 4))
        mask[0, 0, :] = 1.0
        assert patch_obtrusiveness(mask) == pytest.approx(0.25)

    def test_linear_in_mask(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.uniform(size=(2, 1, 6, 6))
            w = float(rng.uniform())
            mixed = patch_obtrusiveness(w * a + (1 - w) * b)
            assert mixed == pytest.approx(w * patch_obtrusiveness(a) + (1 - w) * patch_obtrusiveness(b), abs=1e-12)

    def test_bounds(self):
        assert patch_obtrusiveness(np.zeros((1, 3, 3))) == 0.0
        assert patch_obtrusiveness(np.ones((1, 3, 3))) == 1.0

    def test_image_relative_opacity(self):
        assert image_relative_opacity(0.5, 0.4) == pytest.approx(0.1)
        assert image_relative_opacity(1.0, 1.0) == 1.0

    def test_mask_validation(self):
        with pytest.raises(ShapeError):
            validate_mask(np.ones((3, 4, 4)))
        with pytest.raises(ShapeError):
            validate_mask(np.full((1, 4, 4), 1.5))
        with pytest.raises(ShapeError):
            validate_mask(np.ones((1, 4, 4)), patch_shape=(3, 5, 5))
        with pytest.raises(NonFiniteError):
            validate_mask(np.full((1, 4, 4), np.nan))


class TestBlending:

    def _case(self, rng):
        support = TransformSupport(theta_max=math.pi, scale_low=0.2, scale_high=0.6)
        image = rng.uniform(size=(3, 16, 16))
        patch = rng.uniform(size=(3, 6, 6))
        spec = sample_transform(support, image.shape, patch.shape, rng)
        return image, patch, spec

    def test_opaque_mask_equals_opaque_application(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            image, patch, spec = self._case(rng)
            blended = blend_apply(image, patch, np.ones((1, 6, 6)), spec).values
            np.testing.assert_allclose(blended, apply_patch_opaque(image, patch, spec).values, atol=1e-12)

    def test_empty_mask_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            image, patch, spec = self._case(rng)
            np.testing.assert_array_equal(blend_apply(image, patch, np.zeros((1, 6, 6)), spec).values, image)

    def test_blend_is_per_pixel_convex(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            image, patch, spec = self._case(rng)
            mask = rng.uniform(size=(1, 6, 6))
            blended = blend_apply(image, patch, mask, spec).values
            canvas, footprint = warp_patch(patch, spec, image.shape)
            low = np.minimum(image, canvas.values)
            high = np.maximum(image, canvas.values)
            assert np.all(blended >= low - 1e-12) and np.all(blended <= high + 1e-12)
            np.testing.assert_array_equal(blended[:, ~footprint], image[:, ~footprint])

    def test_mask_shape_must_match_patch(self):
        image, patch, spec = self._case(np.random.default_rng(3))
        with pytest.raises(ShapeError):
            blend_apply(image, patch, np.ones((1, 5, 5)), spec)


class TestJointLoss:

    def _attacked(self):
        return Tensor(np.full((2, 3, 16, 16), 0.2))

    def test_negative_gamma_rejected(self, linear_stub):
        with pytest.raises(ConfigError):
            joint_loss(linear_stub, self._attacked(), 1, np.ones((1, 4, 4)), -1.0)

    def test_zero_gamma_is_target_loss(self, linear_stub):
        total, target, _ = joint_loss(linear_stub, self._attacked(), 1, np.full((1, 4, 4), 0.7), 0.0)
        assert total.item() == pytest.approx(target.item(), abs=1e-15)

    def test_full_mask_adds_gamma(self, linear_stub):
        total, target, po = joint_loss(linear_stub, self._attacked(), 1, np.ones((1, 4, 4)), 1.0)
        assert po.item() == 1.0
        assert total.item() == pytest.approx(target.item() + 1.0)


class TestGammaSchedule:

    def test_decays_once_after_patience(self):
        schedule = GammaSchedule(gamma=10.0, decay=0.5, threshold=0.1, patience=5)
        for step in range(5):
            schedule = gamma_step(schedule, 0.05)
            if step < 4:
                assert schedule.gamma == 10.0
        assert schedule.gamma == 5.0
        assert schedule.stage == 1
        assert schedule.counter == 0

    def test_loss_above_threshold_resets_counter(self):
        schedule = GammaSchedule(patience=3)
        for loss in (0.05, 0.05, 0.2, 0.05, 0.05):
            schedule = gamma_step(schedule, loss)
        assert schedule.gamma == 10.0
        assert schedule.counter == 2

    def test_constant_high_loss_never_decays(self):
        schedule = GammaSchedule()
        for _ in range(50):
            schedule = gamma_step(schedule, 0.5)
        assert schedule.gamma == 10.0 and schedule.stage == 0

    def test_floor(self):
        schedule = GammaSchedule(gamma=0.0015, floor=1e-3, patience=1)
        schedule = gamma_step(schedule, 0.0)
        assert schedule.gamma == 1e-3 and schedule.stage == 1
        schedule = gamma_step(schedule, 0.0)
        assert schedule.gamma == 1e-3 and schedule.stage == 1

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            GammaSchedule(decay=1.0)
        with pytest.raises(ConfigError):
            GammaSchedule(patience=0)

    def test_spike_detection(self):
        assert detect_loss_spikes([0.05, 0.05, 0.5, 0.05], [10, 10, 5, 5]) == (1, 1)
        assert detect_loss_spikes([0.05, 0.05, 0.05, 0.05], [10, 10, 5, 5]) == (1, 0)
        with pytest.raises(ShapeError):
            detect_loss_spikes([0.1], [10, 10])


class TestOpacityMatchedControl:

    def test_matched_scale(self):
        assert matched_control_scale(0.25, 0.45, 32) == pytest.approx(0.225)
        assert matched_control_scale(1.0, 0.45, 32) == pytest.approx(0.45)

    @pytest.mark.parametrize("po", [0.0, 1.2])
    def test_obtrusiveness_out_of_range(self, po):
        with pytest.raises(PlacementError):
            matched_control_scale(po, 0.45, 32)

    def test_control_smaller_than_a_pixel(self):
        with pytest.raises(PlacementError) as excinfo:
            matched_control_scale(0.01, 0.05, 32)
        assert excinfo.value.scale == pytest.approx(0.005)

    def test_opacity_matched(self):
        assert opacity_matched(0.45, 0.25, 0.225, 32)
        assert not opacity_matched(0.45, 0.25, 0.45, 32)

    def test_control_config_scales_support(self):
        semi = TransformSupport(theta_max=0.5, scale_low=0.4, scale_high=0.5)
        control = make_opacity_matched_control(0.25, semi, 32, _transparent_config(seed=6))
        assert control.support.scale_low == pytest.approx(0.2)
        assert control.support.scale_high == pytest.approx(0.25)
        assert control.support.theta_max == 0.5
        assert control.iterations == 2 and control.seed == 6


class TestJointOptimization:

    def test_traces_and_bounds(self, linear_stub, dark_pool):
        result = optimize_transparent(linear_stub, 1, dark_pool, _transparent_config(), progress=False)
        assert len(result.target_trace) == len(result.po_trace) == len(result.gamma_trace) == 4
        assert result.mask.min() >= 0.0 and result.mask.max() <= 1.0
        assert result.patch.pixels.min() >= 0.0 and result.patch.pixels.max() <= 1.0
        assert all(b <= a for a, b in zip(result.gamma_trace, result.gamma_trace[1:]))
        assert result.obtrusiveness == pytest.approx(patch_obtrusiveness(result.mask))

    def test_zero_learning_rate_keeps_initial_mask(self, linear_stub, dark_pool):
        result = optimize_transparent(linear_stub, 1, dark_pool, _transparent_config(learning_rate=0.0),
                                      progress=False)
        assert result.obtrusiveness == pytest.approx(0.9)
        assert result.po_trace[0] == pytest.approx(0.81)

    def test_heavy_obtrusiveness_weight_collapses_mask(self, linear_stub, dark_pool):
        result = optimize_transparent(linear_stub, 1, dark_pool, _transparent_config(iterations=3), progress=False)
        assert result.obtrusiveness < 0.05

    def test_control_training(self, linear_stub, dark_pool):
        config = _transparent_config(learning_rate=0.0)
        semi = optimize_transparent(linear_stub, 1, dark_pool, config, progress=False)
        control = optimize_opacity_matched_control(linear_stub, semi, dark_pool, config, progress=False)
        assert control.support.scale_low == pytest.approx(0.5 * math.sqrt(semi.obtrusiveness))
        assert control.metadata["matched_obtrusiveness"] == semi.obtrusiveness
        assert len(control.loss_curve) == 2

    def test_bundle_round_trip(self, linear_stub, dark_pool, tmp_path):
        result = optimize_transparent(linear_stub, 1, dark_pool, _transparent_config(iterations=2), progress=False)
        paths = save_mask_bundle(result, tmp_path)
        assert set(paths) == {"patch_png", "patch_npy", "mask_png", "mask_npy", "json"}
        loaded = load_mask_bundle(tmp_path)
        np.testing.assert_array_equal(loaded.mask, result.mask)
        np.testing.assert_array_equal(loaded.patch.pixels, result.patch.pixels)
        assert loaded.gamma_trace == result.gamma_trace
        assert loaded.obtrusiveness == result.obtrusiveness
