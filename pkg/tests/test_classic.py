import math

import numpy as np
import pytest

from irps.core import ImageStack, LightSet, mean_angular_error
from irps.errors import CalibrationError, DegenerateLightsError
from irps.forwardsim import SceneSpec, simulate
from irps.solvers import (
    AZIMUTH_BINS,
    INTENSITY_BINS,
    bin_direction,
    bin_intensity,
    calibrate_from_sphere,
    direction_angles,
    direction_bin_center,
    intensity_bin_center,
    scaled_normals,
    sphere_normals,
    woodham_solve,
)
from irps.solvers.classic import reflect_view


class TestWoodham:
    def test_exact_on_tilted_plane(self, mini_stack):
        stack, lights, normals = mini_stack
        est, albedo = woodham_solve(stack, lights)
        assert mean_angular_error(est, normals) < 1e-6
        np.testing.assert_allclose(albedo.albedo[stack.mask], 0.6, atol=1e-9)

    def test_scaled_normals_shape(self, mini_stack):
        stack, lights, _ = mini_stack
        assert scaled_normals(stack, lights).shape == (stack.m, 3, 1)

    def test_collinear_lights_are_degenerate(self, mini_stack):
        stack, _, _ = mini_stack
        flat = LightSet.from_vectors([[0.1, 0, 1], [0.2, 0, 1], [0.3, 0, 1], [0.4, 0, 1]])
        with pytest.raises(DegenerateLightsError):
            woodham_solve(stack, flat)

    def test_light_count_mismatch(self, mini_stack):
        stack, lights, _ = mini_stack
        with pytest.raises(ValueError):
            woodham_solve(stack, lights.subset(slice(0, 3)))

    def test_albedo_is_clamped(self, mini_stack):
        stack, lights, _ = mini_stack
        bright = stack.with_images(stack.images * 4.0)
        _, albedo = woodham_solve(bright, lights)
        assert albedo.albedo.max() < 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_convex_lambertian_scenes(self, seed):
        spec = SceneSpec(primitive="sphere", resolution=32, specular=0.0, interreflection=False,
                         lights=10, light_layout="random", slant_max=35.0, seed=seed)
        stack, lights, scene = simulate(spec)
        est, _ = woodham_solve(stack, lights)
        assert mean_angular_error(est, scene.normals) < 0.5


class TestBinning:
    def test_direction_angles(self):
        phi, theta = direction_angles(np.array([0.0, 0.0, 1.0]))
        assert phi == pytest.approx(math.pi / 2)
        assert theta == pytest.approx(0.0)

    def test_behind_object_plane(self):
        with pytest.raises(ValueError, match="behind object plane"):
            direction_angles(np.array([0.0, 0.0, -1.0]))

    def test_view_direction_bin(self):
        assert bin_direction(np.array([0.0, 0.0, 1.0])) == (AZIMUTH_BINS // 2, 18)

    def test_bin_edges(self):
        # azimuth pi lies on the closed top edge
        assert bin_direction(np.array([-1.0, 0.0, 0.0]))[0] == AZIMUTH_BINS - 1
        assert bin_direction(np.array([1.0, 0.0, 0.0]))[0] == 0

    def test_center_falls_in_its_bin(self):
        for az, el in [(0, 0), (5, 30), (17, 18), (35, 35)]:
            assert bin_direction(direction_bin_center(az, el)) == (az, el)

    def test_intensity_bins(self):
        assert bin_intensity(0.2) == 0
        assert bin_intensity(2.0) == INTENSITY_BINS - 1
        assert bin_intensity(0.28) == 0
        assert bin_intensity(0.3) == 1
        assert intensity_bin_center(0) == pytest.approx(0.245)

    @pytest.mark.parametrize("e", [0.1, 2.01])
    def test_intensity_out_of_range(self, e):
        with pytest.raises(ValueError, match="outside the valid interval"):
            bin_intensity(e)


class TestCalibration:
    def test_reflect_view_of_view_is_view(self):
        np.testing.assert_allclose(reflect_view(np.array([0.0, 0.0, 1.0])), [0, 0, 1])

    def test_reflect_view_doubles_the_slant(self):
        n = np.array([0.0, math.sin(math.pi / 8), math.cos(math.pi / 8)])
        np.testing.assert_allclose(reflect_view(n), [0.0, math.sin(math.pi / 4), math.cos(math.pi / 4)], atol=1e-12)

    def test_sphere_normals_centre(self):
        normals, inside = sphere_normals((21, 21), (10.0, 10.0), 8.0)
        np.testing.assert_allclose(normals[10, 10], [0, 0, 1])
        assert not inside[0, 0]

    def test_glossy_sphere(self):
        spec = SceneSpec(primitive="sphere", resolution=128, albedo=0.5, specular=0.6, shininess=64,
                         interreflection=False, lights=24, slant_min=15, slant_max=50)
        stack, lights, _ = simulate(spec)
        c = (spec.resolution - 1) / 2.0
        est = calibrate_from_sphere(stack, (c, c), 0.45 * spec.resolution, albedo=spec.albedo)
        cos = np.clip(np.sum(est.directions * lights.directions, axis=1), -1, 1)
        assert np.degrees(np.arccos(cos)).mean() < 2.0
        np.testing.assert_allclose(est.intensities, lights.intensities, rtol=0.01)

    def test_lambertian_sphere_has_no_highlight(self):
        spec = SceneSpec(primitive="sphere", resolution=64, albedo=0.5, specular=0.0,
                         interreflection=False, lights=6)
        stack, _, _ = simulate(spec)
        c = (spec.resolution - 1) / 2.0
        with pytest.raises(CalibrationError, match="no highlight found in image"):
            calibrate_from_sphere(stack, (c, c), 0.45 * spec.resolution, albedo=spec.albedo)

    def test_dark_image(self):
        mask = np.ones((32, 32), dtype=bool)
        stack = ImageStack(np.zeros((3, 32, 32)), mask)
        with pytest.raises(CalibrationError, match="image 1"):
            calibrate_from_sphere(stack, (15.5, 15.5), 12.0)
