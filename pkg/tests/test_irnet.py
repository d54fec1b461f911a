import dataclasses

import numpy as np
import pytest

from irps.autodiff import Tape, Tensor, gradcheck, hadamard, specular_guide, sum_all
from irps.core import AlbedoMap, ImageStack, NormalMap, mean_angular_error
from irps.errors import SolverError
from irps.forwardsim import SceneSpec, add_noise, simulate
from irps.geometry import build_facets
from irps.solvers import FitConfig, FitEvent, LossRecord, fit, fit_iter, robust_initialize, woodham_solve
from irps.solvers.interreflection import InterreflectionOperator
from irps.solvers.irnet import (
    FacetTransfer,
    FitInputs,
    NetParams,
    _normal_map,
    build_transfer,
    crop_window,
    forward_pass,
    objective,
    rec_loss,
    sample_mask,
    specular_map,
    weak_loss,
)

SMALL = dict(feature_widths=(4, 4), specular_widths=(3, 3), global_width=4, reflectance_width=4)


def _small_cfg(**kw) -> FitConfig:
    return FitConfig(**{**SMALL, **kw})


@pytest.fixture
def tiny_inputs(mini_stack):
    stack, lights, normals = mini_stack
    return FitInputs.from_stack(stack, lights), normals


class TestFitConfig:
    @pytest.mark.parametrize("field, value", [
        ("iterations", -1),
        ("lr", 0.0),
        ("sample_fraction", 0.0),
        ("sample_fraction", 1.5),
        ("kernel_refresh", 0),
        ("activation", "tanh"),
        ("init_mode", "xavier"),
        ("feature_widths", ()),
        ("crop_padding", -1),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            FitConfig(**{field: value})

    def test_variance_mode_takes_square_root(self):
        assert FitConfig(init_std=0.04, init_mode="variance").weight_std == pytest.approx(0.2)
        assert FitConfig(init_std=0.04).weight_std == pytest.approx(0.04)


class TestInputs:
    def test_scale_is_twice_rms(self, mini_stack):
        stack, lights, _ = mini_stack
        inputs = FitInputs.from_stack(stack, lights)
        rms = np.sqrt(np.mean(stack.images[:, stack.mask, :] ** 2))
        assert inputs.scale == pytest.approx(2 * rms)
        assert inputs.images.shape == (stack.n, stack.c, stack.h, stack.w)
        np.testing.assert_allclose(inputs.images[:, 0], stack.images[..., 0] * stack.mask / inputs.scale)

    def test_feature_input_channels(self, tiny_inputs):
        inputs, _ = tiny_inputs
        phi = inputs.features_input()
        assert phi.shape == (1, inputs.n * inputs.c + 1, 8, 8)
        np.testing.assert_array_equal(phi.data[0, -1], inputs.mask)

    def test_dark_stack(self, mini_stack):
        stack, lights, _ = mini_stack
        with pytest.raises(SolverError, match="no signal"):
            FitInputs.from_stack(stack.with_images(np.zeros_like(stack.images)), lights)


class TestParams:
    def test_shapes_and_groups(self):
        cfg = _small_cfg()
        params = NetParams.initialize(5, 3, cfg, np.random.default_rng(0))
        assert params["xi_f.0.w"].shape == (4, 5 * 3 + 1, 3, 3)
        assert params["xi_n1.w"].shape == (3, 4, 3, 3)
        assert "xi_n1.gamma" not in params
        assert params["f_sp.0.w"].shape == (3, 3 + 1, 3, 3)
        assert params["f_lg.w"].shape == (4, 3 + 4)
        assert params["f_r.1.w"].shape == (3, 4, 3, 3)
        assert len(params.estimation()) + len(params.rendering()) == len(params.tensors)
        np.testing.assert_array_equal(params["f_lg.gamma"].data, 1.0)
        np.testing.assert_array_equal(params["f_r.0.b"].data, 0.0)

    def test_initial_weights_follow_std(self):
        params = NetParams.initialize(16, 1, FitConfig(), np.random.default_rng(0))
        assert params["xi_f.0.w"].data.std() == pytest.approx(0.02, rel=0.05)


class TestForward:
    def test_outputs(self, tiny_inputs):
        inputs, _ = tiny_inputs
        cfg = _small_cfg()
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(1))
        out = forward_pass(inputs, params, cfg)
        assert out.rendered.shape == inputs.images.shape
        assert out.reflectance.shape == inputs.images.shape
        np.testing.assert_allclose(np.linalg.norm(out.normals_o.data[0], axis=0), 1.0)
        assert out.reflectance.data.min() >= 0.0

    def test_rendering_is_zero_where_unlit(self, tiny_inputs):
        inputs, _ = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(2))
        out = forward_pass(inputs, params, cfg)
        shading = np.einsum("bk,khw->bhw", inputs.lights, out.normals_ny.data[0])
        assert not out.rendered.data[:, 0][shading <= 0].any()

    def test_doubling_intensities_doubles_rendering(self, tiny_inputs):
        inputs, _ = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(3))
        once = forward_pass(inputs, params, cfg).rendered.data
        brighter = dataclasses.replace(inputs, lights=2.0 * inputs.lights)
        twice = forward_pass(brighter, params, cfg).rendered.data
        np.testing.assert_allclose(twice, 2.0 * once, atol=1e-12)

    def test_zero_kernel_transfer_is_identity(self, tiny_inputs):
        inputs, normals = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        fs = build_facets(normals, AlbedoMap(np.full((8, 8), 0.5), normals.mask), factor=2)
        transfer = FacetTransfer(fs, InterreflectionOperator.identity(fs.k))
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(4))
        out = forward_pass(inputs, params, cfg, transfer)
        np.testing.assert_allclose(out.normals_ny.data, out.normals_o.data, atol=1e-12)

    def test_noise_reaches_only_the_specular_branch(self, tiny_inputs):
        inputs, _ = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(5))
        noise = np.random.default_rng(6).normal(0.0, 0.3, size=inputs.images.shape)
        clean = forward_pass(inputs, params, cfg)
        noisy = forward_pass(inputs, params, cfg, noise=noise)
        np.testing.assert_array_equal(clean.normals_o.data, noisy.normals_o.data)
        assert not np.allclose(clean.reflectance.data, noisy.reflectance.data)


class TestTransfer:
    def test_adjoint(self, small_bowl, rng):
        stack, lights, scene = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        transfer = build_transfer(normals, albedo, stack.mask, factor=4)
        x = rng.normal(size=(1, 3) + stack.mask.shape)
        y = rng.normal(size=(1, 3) + stack.mask.shape)
        lhs = np.sum(transfer.forward(x) * y)
        rhs = np.sum(x * transfer.adjoint(y))
        assert lhs == pytest.approx(rhs, rel=1e-9)

    def test_gradient_through_transfer(self, small_bowl, rng):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        transfer = build_transfer(normals, albedo, stack.mask, factor=4)
        x = Tensor(rng.normal(size=(1, 3) + stack.mask.shape))
        w = Tensor(rng.normal(size=x.shape))
        assert gradcheck(lambda t: sum_all(hadamard(transfer(t), w)), x, coords=30) < 1e-4


class TestLosses:
    def test_rec_loss_of_identical_stacks(self, tiny_inputs):
        inputs, _ = tiny_inputs
        assert rec_loss(inputs.images, inputs.images, inputs.mask).item() == 0.0

    def test_rec_loss_value(self):
        mask = np.ones((4, 4), dtype=bool)
        X = np.zeros((2, 1, 4, 4))
        assert rec_loss(X, X + 0.25, mask).item() == pytest.approx(0.25)

    def test_sample_mask_fraction(self, disk_mask):
        W = sample_mask(disk_mask, 0.1, np.random.default_rng(0))
        assert W.sum() == round(0.1 * disk_mask.sum())
        assert not W[~disk_mask].any()

    def test_weak_loss_values(self, disk_mask):
        x = NormalMap.constant((1, 0, 0), disk_mask)
        antipodal = NormalMap.constant((-1, 0, 0), disk_mask)
        up = NormalMap.constant((0, 0, 1), disk_mask)
        assert weak_loss(x, x, disk_mask).item() == 0.0
        assert weak_loss(x, antipodal, disk_mask).item() == pytest.approx(4.0)
        assert weak_loss(x, up, disk_mask).item() == pytest.approx(2.0)

    @pytest.mark.parametrize("name", ["xi_f.0.w", "xi_n1.w", "f_sp.0.gamma", "f_lg.w", "f_r.1.w"])
    def test_objective_gradient(self, tiny_inputs, name):
        inputs, normals = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(7))
        init = Tensor(normals.normals.transpose(2, 0, 1)[None])
        sample = inputs.mask.astype(float)

        def loss(t):
            return objective(inputs, params, cfg, None, init, sample, 0.3)[0]

        assert gradcheck(loss, params[name], coords=20) < 1e-4

    def test_small_gradient_step_does_not_increase_rec(self, tiny_inputs):
        inputs, normals = tiny_inputs
        cfg = _small_cfg(init_std=0.5)
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(8))
        init = Tensor(normals.normals.transpose(2, 0, 1)[None])
        sample = sample_mask(inputs.mask, 1.0, np.random.default_rng(0))
        with Tape() as tape:
            loss, l_rec, _, _ = objective(inputs, params, cfg, None, init, sample, 0.0)
        tape.backward(loss)
        grads = [t.grad.copy() for t in params.tensors.values()]
        norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads))
        assert norm > 0
        for t, g in zip(params.tensors.values(), grads):
            t.data -= 1e-6 * g / norm
        after = objective(inputs, params, cfg, None, init, sample, 0.0)[1].item()
        assert after <= l_rec.item()


class TestSpecularMap:
    def test_mirror_configurations(self, disk_mask):
        up = NormalMap.constant((0, 0, 1), disk_mask)
        assert specular_map(up, np.array([0.0, 0.0, 1.0]))[8, 8] == pytest.approx(1.0)
        assert specular_map(up, np.array([0.0, 1.0, 0.0]))[8, 8] == pytest.approx(0.0)
        half = np.array([0.0, 1.0, 1.0]) / np.sqrt(2)
        tilted = NormalMap.constant(half, disk_mask)
        assert specular_map(tilted, np.array([0.0, 1.0, 0.0]))[8, 8] == pytest.approx(1.0)

    def test_zero_outside_mask(self, disk_mask):
        up = NormalMap.constant((0, 0, 1), disk_mask)
        assert specular_map(up, np.array([0.0, 0.0, 1.0]))[0, 0] == 0.0

    def test_taped_guide_matches_map(self, rng, disk_mask):
        vectors = rng.normal(size=disk_mask.shape + (3,))
        vectors[..., 2] = np.abs(vectors[..., 2]) + 0.1
        nm = NormalMap.from_vectors(vectors * disk_mask[..., None], disk_mask)
        l = np.array([0.3, -0.2, 0.9])
        l /= np.linalg.norm(l)
        taped = specular_guide(Tensor(nm.normals.transpose(2, 0, 1)[None]), l[None], disk_mask)
        np.testing.assert_allclose(taped.data[0, 0], specular_map(nm, l), atol=1e-12)


class TestNormalMap:
    def test_dead_pixels_take_the_fallback(self, disk_mask):
        fallback = NormalMap.constant((0.0, 0.6, 0.8), disk_mask)
        raw = np.zeros((1, 3) + disk_mask.shape)
        raw[0, 2] = 1.0
        raw[0, :, 8, 8] = 0.0
        raw[0, :, 8, 9] = [0.0, 0.0, -1.0]
        nm = _normal_map(Tensor(raw), disk_mask, fallback)
        np.testing.assert_allclose(nm.normals[8, 8], [0.0, 0.6, 0.8])
        np.testing.assert_allclose(nm.normals[8, 9], [0.0, 0.6, 0.8])
        np.testing.assert_allclose(nm.normals[8, 7], [0.0, 0.0, 1.0])

    def test_zeroed_estimation_head(self, tiny_inputs):
        inputs, normals = tiny_inputs
        cfg = _small_cfg()
        params = NetParams.initialize(inputs.n, inputs.c, cfg, np.random.default_rng(9))
        params["xi_n1.w"].data[:] = 0.0
        out = forward_pass(inputs, params, cfg)
        assert not out.normals_o.data.any()
        nm = _normal_map(out.normals_o, inputs.mask, normals)
        np.testing.assert_allclose(nm.normals, normals.normals)


class TestCrop:
    def test_window_grows_by_padding(self):
        mask = np.zeros((20, 30), dtype=bool)
        mask[5:9, 10:14] = True
        assert crop_window(mask, 2) == (slice(3, 11), slice(8, 16))
        assert crop_window(mask, 10) == (slice(0, 19), slice(0, 24))

    def test_empty_mask_keeps_the_frame(self):
        assert crop_window(np.zeros((4, 5), dtype=bool), 2) == (slice(0, 4), slice(0, 5))


class TestFit:
    def test_zero_iterations(self, small_bowl):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        result = fit(stack, lights, normals, albedo, _small_cfg(iterations=0))
        assert result.trace == []
        assert [e.kind for e in result.events] == ["kernel_refresh"]
        assert result.reflectance.shape == (stack.n, stack.h, stack.w, stack.c)
        assert result.normals_ny.shape == stack.mask.shape

    def test_zero_iterations_with_dead_pixels(self, small_bowl):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        for seed in range(3):
            result = fit(stack, lights, normals, albedo, _small_cfg(iterations=0, seed=seed))
            inside = result.normals_ny.normals[stack.mask]
            np.testing.assert_allclose(np.linalg.norm(inside, axis=1), 1.0)

    def test_without_interreflection(self, small_bowl):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        result = fit(stack, lights, normals, albedo, _small_cfg(iterations=3, interreflection=False, kernel_refresh=1))
        assert not any(e.kind == "kernel_refresh" for e in result.events)
        np.testing.assert_array_equal(result.normals_ny.normals, result.normals_o.normals)

    def test_fit_runs_on_the_object_crop(self, small_bowl):
        stack, lights, _ = small_bowl
        pad = ((0, 0), (10, 10), (6, 6), (0, 0))
        framed = ImageStack(np.pad(stack.images, pad), np.pad(stack.mask, pad[1:3]))
        normals, albedo = woodham_solve(framed, lights)
        result = fit(framed, lights, normals, albedo, _small_cfg(iterations=2, crop_padding=2))
        assert result.normals_ny.shape == framed.mask.shape
        assert result.depth.depth.shape == framed.mask.shape
        assert result.reflectance.shape == (framed.n, framed.h, framed.w, framed.c)
        outside = np.ones(framed.mask.shape, dtype=bool)
        outside[crop_window(framed.mask, 2)] = False
        assert outside.any()
        assert not result.reflectance[:, outside].any()
        assert not result.normals_ny.normals[~framed.mask].any()

    def test_schedule_is_recorded(self, small_bowl):
        stack, lights, scene = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        cfg = _small_cfg(iterations=12, weak_cutoff=5, lr_drop_at=8, kernel_refresh=6, sample_fraction=0.5)
        items = []
        gen = fit_iter(stack, lights, normals, albedo, cfg, scene.normals)
        while True:
            try:
                items.append(next(gen))
            except StopIteration as stop:
                result = stop.value
                break

        records = [i for i in items if isinstance(i, LossRecord)]
        events = [i for i in items if isinstance(i, FitEvent)]
        assert [r.iteration for r in records] == list(range(1, 13))
        assert all(r.lambda_w == pytest.approx(result.lambda_w) for r in records[:5])
        assert all(r.lambda_w == 0.0 for r in records[5:])
        assert result.lambda_w > 0
        assert records[7].lr == pytest.approx(cfg.lr)
        assert records[8].lr == pytest.approx(cfg.lr * cfg.lr_drop)
        assert [(e.iteration, e.kind) for e in events] == [
            (0, "kernel_refresh"), (7, "kernel_refresh"), (9, "lr_drop"),
        ]
        assert all(r.mae is not None for r in records)
        assert result.events == events
        assert result.iterations == 12

    def test_deterministic_per_seed(self, small_bowl):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        cfg = _small_cfg(iterations=3, seed=11)
        a = fit(stack, lights, normals, albedo, cfg)
        b = fit(stack, lights, normals, albedo, cfg)
        assert [r.rec for r in a.trace] == [r.rec for r in b.trace]
        np.testing.assert_array_equal(a.normals_ny.normals, b.normals_ny.normals)

    def test_initial_normals_must_cover_mask(self, small_bowl):
        stack, lights, _ = small_bowl
        normals, albedo = woodham_solve(stack, lights)
        partial = np.zeros_like(stack.mask)
        partial[:12] = stack.mask[:12]
        short = NormalMap.from_vectors(np.where(partial[..., None], normals.normals, 0.0), partial)
        with pytest.raises(SolverError, match="do not cover"):
            fit(stack, lights, short, albedo, _small_cfg(iterations=1))

    @pytest.mark.slow
    def test_full_fit_on_bowl(self):
        spec = SceneSpec(primitive="concave-bowl", resolution=64, albedo=0.8, specular=0.3,
                         interreflection=True, lights=16)
        stack, lights, scene = simulate(spec)
        normals, albedo, _ = robust_initialize(stack, lights)
        result = fit(stack, lights, normals, albedo, FitConfig(seed=0), scene.normals)
        assert result.trace[-1].rec < 0.2 * result.trace[0].rec
        assert mean_angular_error(result.normals_ny, scene.normals) <= mean_angular_error(normals, scene.normals)


@pytest.mark.slow
def test_error_grows_with_noise():
    spec = SceneSpec(primitive="concave-bowl", resolution=64, albedo=0.8, specular=0.3,
                     interreflection=True, lights=16)
    clean, lights, scene = simulate(spec)
    cfg = FitConfig(iterations=200, lr_drop_at=180, sample_fraction=0.25, kernel_refresh=50)
    woodham, irnet = [], []
    for sigma in (0.0, 0.05, 0.1, 0.2):
        stack = add_noise(clean, sigma, seed=0)
        normals, albedo = woodham_solve(stack, lights)
        woodham.append(mean_angular_error(normals, scene.normals))
        result = fit(stack, lights, normals, albedo, cfg)
        irnet.append(mean_angular_error(result.normals_ny, scene.normals))
    assert woodham == sorted(woodham)
    assert irnet == sorted(irnet)
