import numpy as np
import pytest

from irps.core import ImageStack, LightSet, NormalMap, mean_angular_error
from irps.errors import SolverError
from irps.forwardsim import random_lights
from irps.solvers import (
    normals_from_lowrank,
    partial_svt,
    robust_initialize,
    rpca_partial_sum,
    soft_threshold,
    woodham_solve,
)


@pytest.mark.parametrize(
    "x, tau, expected",
    [(3.0, 1.0, 2.0), (-3.0, 1.0, -2.0), (0.5, 1.0, 0.0), (-0.5, 1.0, 0.0), (2.0, 0.0, 2.0), (1.0, 1.0, 0.0)],
)
def test_soft_threshold_table(x, tau, expected):
    assert soft_threshold(x, tau) == pytest.approx(expected)


def test_soft_threshold_rejects_negative_tau():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


class TestPartialSvt:
    def test_diagonal_example(self):
        out = partial_svt(np.diag([5.0, 3.0, 1.0]), K=1, tau=2.0)
        np.testing.assert_allclose(out, np.diag([5.0, 1.0, 0.0]), atol=1e-12)

    @pytest.mark.parametrize("shape", [(40, 6), (200, 6)])
    def test_low_rank_input_unchanged(self, rng, shape):
        M = rng.normal(size=(shape[0], 3)) @ rng.normal(size=(3, shape[1]))
        out = partial_svt(M, K=3, tau=0.7)
        assert np.linalg.norm(out - M) < 1e-10 * max(1.0, np.linalg.norm(M))

    def test_gram_route_matches_svd(self, rng):
        M = rng.normal(size=(300, 8))
        fast = partial_svt(M, K=2, tau=1.5)
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        s[2:] = np.maximum(s[2:] - 1.5, 0.0)
        np.testing.assert_allclose(fast, (U * s) @ Vt, atol=1e-8)

    def test_k_zero_is_plain_svt(self):
        out = partial_svt(np.diag([5.0, 3.0, 1.0]), K=0, tau=2.0)
        np.testing.assert_allclose(out, np.diag([3.0, 1.0, 0.0]), atol=1e-12)


def _corrupted_problem(seed: int, m: int = 4096, n: int = 16):
    """Rank-3 shading X = N^T L plus 10% uniform sparse corruption"""
    rng = np.random.default_rng(seed)
    # both within 40 degrees of the view, so every shading value is positive
    N = random_lights(m, rng, max_slant=40.0)
    lights = LightSet.from_vectors(random_lights(n, rng, max_slant=40.0))
    X = N @ lights.directions.T
    corrupt = rng.random(X.shape) < 0.1
    X_bad = X + corrupt * rng.uniform(0.0, 1.0, size=X.shape)
    side = int(np.sqrt(m))
    mask = np.ones((side, side), dtype=bool)
    gt = NormalMap.from_vectors(N.reshape(side, side, 3), mask)
    return X_bad, lights, mask, gt


class TestRpca:
    def test_clean_low_rank_converges(self, rng):
        X = np.abs(rng.normal(size=(100, 3))) @ np.abs(rng.normal(size=(3, 12)))
        result = rpca_partial_sum(X)
        assert result.converged
        assert result.residual < 1e-7
        np.testing.assert_allclose(result.Z + result.E, X, atol=1e-5 * np.abs(X).max())

    def test_zero_matrix(self):
        result = rpca_partial_sum(np.zeros((10, 5)))
        assert result.converged and result.iterations == 0

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            rpca_partial_sum(np.ones((2, 10)))
        with pytest.raises(ValueError):
            rpca_partial_sum(np.ones(10))

    def test_iteration_cap_reports_not_converged(self, rng):
        result = rpca_partial_sum(rng.normal(size=(50, 8)), max_iter=2)
        assert result.iterations == 2
        assert not result.converged

    def test_single_spike_lands_in_sparse_part(self):
        rng = np.random.default_rng(3)
        # well-conditioned rank 3, every singular value far above the spike
        N = rng.normal(size=(400, 3))
        L = rng.normal(size=(16, 3))
        X = N @ L.T
        X[17, 5] += 10.0
        result = rpca_partial_sum(X, tol=1e-10, max_iter=500)
        assert result.E[17, 5] == pytest.approx(10.0, abs=1e-5)
        rest = np.abs(result.E).copy()
        rest[17, 5] = 0.0
        assert rest.max() < 1e-5
        np.testing.assert_allclose(result.Z, N @ L.T, atol=1e-5)

    def test_bit_deterministic(self):
        X_bad, _, _, _ = _corrupted_problem(4, m=1024)
        a = rpca_partial_sum(X_bad)
        b = rpca_partial_sum(X_bad)
        np.testing.assert_array_equal(a.Z, b.Z)
        np.testing.assert_array_equal(a.E, b.E)
        assert a.iterations == b.iterations

    def test_recovers_normals_under_sparse_corruption(self):
        wins = 0
        for seed in range(10):
            X_bad, lights, mask, gt = _corrupted_problem(seed)
            result = rpca_partial_sum(X_bad)
            normals, _ = normals_from_lowrank(result.Z, lights, mask)
            robust_mae = mean_angular_error(normals, gt)
            assert robust_mae < 2.0

            stack = ImageStack(X_bad.T.reshape(lights.n, *mask.shape), mask)
            direct, _ = woodham_solve(stack, lights, shadow_fraction=0.0)
            wins += robust_mae < mean_angular_error(direct, gt)
        assert wins >= 9


class TestNormalsFromLowrank:
    @pytest.fixture
    def problem(self, rng):
        mask = np.zeros((6, 7), dtype=bool)
        mask[1:5, 1:6] = True
        normals = random_lights(int(mask.sum()), rng, max_slant=50.0)
        lights = LightSet.from_vectors(random_lights(8, rng, max_slant=45.0), np.linspace(0.8, 1.2, 8))
        return mask, normals, lights

    def test_exact_recovery(self, problem):
        mask, normals, lights = problem
        Z = 0.4 * normals @ lights.directions.T
        nm, albedo = normals_from_lowrank(Z, lights, mask)
        np.testing.assert_allclose(nm.normals[mask], normals, atol=1e-10)
        np.testing.assert_allclose(albedo.albedo[mask, 0], 0.4, atol=1e-10)

    def test_scaling_doubles_albedo_only(self, problem):
        mask, normals, lights = problem
        Z = 0.3 * normals @ lights.directions.T
        once, a1 = normals_from_lowrank(Z, lights, mask)
        twice, a2 = normals_from_lowrank(2.0 * Z, lights, mask)
        np.testing.assert_allclose(twice.normals, once.normals, atol=1e-12)
        np.testing.assert_allclose(a2.albedo[mask], 2.0 * a1.albedo[mask], atol=1e-12)

    def test_zero_matrix(self, problem):
        mask, _, lights = problem
        with pytest.raises(SolverError, match="zero-norm normal"):
            normals_from_lowrank(np.zeros((int(mask.sum()), lights.n)), lights, mask)


def test_robust_initialize_on_clean_scene(lambertian_sphere):
    stack, lights, scene = lambertian_sphere
    normals, albedo, result = robust_initialize(stack, lights)
    assert mean_angular_error(normals, scene.normals) < 2.0
    assert albedo.albedo.shape == stack.mask.shape + (1,)
    assert albedo.albedo[stack.mask].max() < 1.0
    assert result.Z.shape == (stack.m, stack.n)
