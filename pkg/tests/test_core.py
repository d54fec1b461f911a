import numpy as np
import pytest

from irps.core import (
    AlbedoMap,
    ImageStack,
    LightSet,
    NormalMap,
    angular_error_map,
    decode_normals,
    encode_normals,
    mean_angular_error,
)
from irps.errors import SolverError


class TestImageStack:
    def test_gray_stack_gets_channel_axis(self, disk_mask):
        stack = ImageStack(np.ones((4, 17, 17)), disk_mask)
        assert (stack.n, stack.h, stack.w, stack.c) == (4, 17, 17, 1)
        assert stack.m == int(disk_mask.sum())
        assert stack.matrix(0).shape == (stack.m, 4)

    def test_rejects_negative_radiance(self, disk_mask):
        images = np.ones((3, 17, 17, 1))
        images[0, 0, 0, 0] = -0.1
        with pytest.raises(ValueError, match="nonnegative"):
            ImageStack(images, disk_mask)

    def test_rejects_empty_mask(self):
        with pytest.raises(ValueError, match="no true pixel"):
            ImageStack(np.ones((3, 4, 4)), np.zeros((4, 4), dtype=bool))

    def test_rejects_mask_shape_mismatch(self, disk_mask):
        with pytest.raises(ValueError, match="mask shape"):
            ImageStack(np.ones((3, 16, 16)), disk_mask)


class TestLightSet:
    def test_from_vectors_renormalizes(self):
        lights = LightSet.from_vectors([[0, 0, 2], [3, 0, 4]])
        np.testing.assert_allclose(np.linalg.norm(lights.directions, axis=1), 1.0)
        np.testing.assert_allclose(lights.intensities, 1.0)

    def test_rejects_non_unit_directions(self):
        with pytest.raises(ValueError, match="unit"):
            LightSet([[0, 0, 2]], [1.0])

    def test_rejects_nonpositive_intensity(self):
        with pytest.raises(ValueError, match="positive"):
            LightSet([[0, 0, 1]], [0.0])

    def test_scaled_folds_intensity(self):
        lights = LightSet.from_vectors([[0, 0, 1]], [2.5])
        np.testing.assert_allclose(lights.scaled(), [[0, 0, 2.5]])


class TestNormalMap:
    def test_back_facing_vectors_fold_onto_horizon(self, disk_mask):
        nm = NormalMap.from_vectors(np.broadcast_to([1.0, 0.0, -1.0], (17, 17, 3)), disk_mask)
        np.testing.assert_allclose(nm.masked(), np.tile([1.0, 0.0, 0.0], (nm.mask.sum(), 1)))

    def test_zero_vector_inside_mask_fails(self, disk_mask):
        with pytest.raises(SolverError, match="zero-norm normal"):
            NormalMap.from_vectors(np.zeros((17, 17, 3)), disk_mask)

    def test_outside_mask_is_zero(self, disk_mask):
        nm = NormalMap.constant((0, 0, 1), disk_mask)
        assert not nm.normals[~disk_mask].any()

    def test_codec_round_trip_within_quantization(self, disk_mask, rng):
        v = rng.normal(size=(17, 17, 3))
        v[..., 2] = np.abs(v[..., 2]) + 0.2
        nm = NormalMap.from_vectors(v, disk_mask)
        back = decode_normals(encode_normals(nm), disk_mask)
        assert mean_angular_error(back, nm) < 0.5

    def test_encoding_of_view_direction(self, disk_mask):
        codes = encode_normals(NormalMap.constant((0, 0, 1), disk_mask))
        assert tuple(codes[8, 8]) == (128, 128, 255)
        assert tuple(codes[0, 0]) == (0, 0, 0)


class TestAlbedoMap:
    def test_rejects_albedo_of_one(self, disk_mask):
        with pytest.raises(ValueError, match=r"\[0, 1\)"):
            AlbedoMap(np.ones((17, 17)), disk_mask)

    def test_clamped_stays_below_one(self, disk_mask):
        a = AlbedoMap.clamped(np.full((17, 17), 3.0), disk_mask)
        assert a.albedo[disk_mask].max() < 1.0
        assert a.albedo.shape == (17, 17, 1)


class TestAngularError:
    def test_identical_maps(self, disk_mask):
        nm = NormalMap.constant((0.3, 0.1, 1.0), disk_mask)
        assert mean_angular_error(nm, nm) == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_maps(self, disk_mask):
        a = NormalMap.constant((0, 0, 1), disk_mask)
        b = NormalMap.constant((1, 0, 0), disk_mask)
        assert mean_angular_error(a, b) == pytest.approx(90.0)
        assert angular_error_map(a, b)[8, 8] == pytest.approx(90.0)

    def test_empty_evaluation_mask(self, disk_mask):
        nm = NormalMap.constant((0, 0, 1), disk_mask)
        with pytest.raises(ValueError, match="no evaluable pixels"):
            mean_angular_error(nm, nm, np.zeros_like(disk_mask))

    def test_shape_mismatch(self, disk_mask):
        a = NormalMap.constant((0, 0, 1), disk_mask)
        b = NormalMap.constant((0, 0, 1), np.ones((5, 5), dtype=bool))
        with pytest.raises(ValueError, match="shape mismatch"):
            angular_error_map(a, b)
