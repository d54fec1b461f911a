import pytest

from irps.context import (
    FIT_PRESETS,
    SCENE_PRESETS,
    RunContext,
    build_dataclass,
    dump_dataclass,
    load_config,
    parse_kv_config,
)
from irps.errors import ConfigError
from irps.forwardsim import SceneSpec
from irps.solvers import FitConfig


def test_parse_kv_config_skips_comments():
    text = "# scene\nprimitive = sphere  # convex\n\nresolution=48\n"
    assert parse_kv_config(text) == {"primitive": "sphere", "resolution": "48"}


def test_parse_kv_config_rejects_bare_words():
    with pytest.raises(ConfigError, match="line 2"):
        parse_kv_config("a = 1\nnonsense\n")


def test_build_dataclass_coerces_types():
    spec = build_dataclass(SceneSpec, {
        "primitive": "bowl",
        "resolution": "48",
        "interreflection": "false",
        "intensities": "0.5, 1.5",
    })
    assert spec.primitive == "concave-bowl"
    assert spec.resolution == 48
    assert spec.interreflection is False
    assert spec.intensities == (0.5, 1.5)


def test_build_dataclass_parses_control_points():
    spec = build_dataclass(SceneSpec, {"primitive": "vase", "profile": "-20:8, 0:12, 20:6"})
    assert spec.profile == ((-20.0, 8.0), (0.0, 12.0), (20.0, 6.0))


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown SceneSpec key"):
        build_dataclass(SceneSpec, {"colour": "red"})


def test_invalid_primitive_is_config_error():
    with pytest.raises(ConfigError, match="unknown primitive"):
        build_dataclass(SceneSpec, {"primitive": "torus"})


def test_optional_float_accepts_none():
    cfg = build_dataclass(FitConfig, {"estimation_lr": "none", "iterations": "5"})
    assert cfg.estimation_lr is None
    assert cfg.iterations == 5


def test_presets_load():
    assert {"sphere", "calib-sphere", "bowl", "vase", "relief"} <= set(SCENE_PRESETS)
    assert {"full", "desk"} <= set(FIT_PRESETS)
    cfg = load_config(FitConfig, "full", FIT_PRESETS)
    assert cfg.iterations == 1000
    assert cfg.estimation_lr == pytest.approx(8e-5)
    spec = load_config(SceneSpec, "bowl", SCENE_PRESETS)
    assert spec.primitive == "concave-bowl"
    assert spec.interreflection


def test_load_config_from_file_overrides_base(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text("iterations = 7\nsample_fraction = 0.5\n")
    cfg = load_config(FitConfig, str(path), FIT_PRESETS, base=FitConfig(seed=3))
    assert (cfg.iterations, cfg.sample_fraction, cfg.seed) == (7, 0.5, 3)


def test_load_config_unknown_source():
    with pytest.raises(ConfigError, match="no preset or file"):
        load_config(SceneSpec, "no-such-scene", SCENE_PRESETS)


def test_dump_round_trips_through_parser():
    spec = SceneSpec(primitive="plane-with-relief", relief=((0, 0, -5, 4),), intensities=(0.5, 1.5))
    again = build_dataclass(SceneSpec, parse_kv_config(dump_dataclass(spec)))
    assert again == spec


class TestRunContext:
    def test_resolve_relative_to_working_directory(self, tmp_path):
        ctx = RunContext(working_directory=tmp_path, threads=None)
        assert ctx.resolve("data") == tmp_path / "data"
        assert ctx.resolve(tmp_path / "x") == tmp_path / "x"

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("PSTEREO_THREADS", "2")
        assert RunContext().threads == 2
        monkeypatch.setenv("PSTEREO_THREADS", "zero")
        with pytest.raises(ConfigError, match="PSTEREO_THREADS"):
            RunContext()

    def test_thread_limits_enter(self, monkeypatch):
        monkeypatch.delenv("PSTEREO_THREADS", raising=False)
        with RunContext(threads=1).thread_limits():
            pass
        with RunContext().thread_limits():
            pass

    def test_out_requires_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            RunContext(threads=None).out
        ctx = RunContext(output_directory=tmp_path / "o", threads=None)
        assert ctx.out.is_dir()
