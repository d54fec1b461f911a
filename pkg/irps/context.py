"""
IRPS run context and configuration layer

- RunContext: working / output directories and the thread cap for one CLI run
- Presets: named scene and fit configurations loaded from irps_config.json
- key = value parsing into dataclasses (SceneSpec, FitConfig)
"""

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError


def _env_threads() -> Optional[int]:
    """PSTEREO_THREADS as a positive int, or None when unset"""
    raw = os.getenv("PSTEREO_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"PSTEREO_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"PSTEREO_THREADS must be >= 1, got {value}")
    return value


# === key = value configs ===

def parse_kv_config(text: str) -> dict[str, str]:
    """Parse 'key = value' lines; '#' starts a comment"""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def _coerce(key: str, value: Any, hint: Any) -> Any:
    """Convert a raw config value (str or JSON scalar/list) to the field's type"""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin in (typing.Union, types.UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])

    if origin is tuple:
        elem = args[0] if args else str
        items = value if isinstance(value, (list, tuple)) else [
            v.strip() for v in str(value).split(",") if v.strip()
        ]
        if typing.get_origin(elem) is tuple:
            return tuple(_numbers(key, item) for item in items)
        return tuple(_coerce(key, item, elem) for item in items)

    if hint is bool:
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")

    if hint in (int, float):
        try:
            number = float(value)
            if hint is int:
                if not number.is_integer():
                    raise ValueError
                return int(number)
            return number
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected {hint.__name__}, got {value!r}")

    if hint is str:
        return str(value)
    return value


def _numbers(key: str, item: Any) -> tuple[float, ...]:
    """One control point: "a:b:c" or a JSON list"""
    if isinstance(item, (list, tuple)):
        parts = list(item)
    else:
        parts = str(item).split(":")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: expected numbers separated by ':', got {item!r}")


def build_dataclass(cls, values: dict[str, Any], base: Any = None):
    """Instantiate `cls` from raw values, optionally overriding an existing instance"""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in values.items()}
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}")


def dump_dataclass(obj) -> str:
    """Serialize a flat dataclass back to 'key = value' text"""
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ", ".join(
                ":".join(f"{x:g}" for x in v) if isinstance(v, tuple) else str(v) for v in value
            )
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# === Presets ===

_CONFIG_PATH = Path(__file__).resolve().parent.parent / "irps_config.json"


def _load_presets() -> dict[str, dict[str, dict]]:
    """Load scene and fit presets from irps_config.json at project root."""
    if not _CONFIG_PATH.exists():
        return {"scenes": {}, "fit": {}}
    with open(_CONFIG_PATH, encoding="utf-8") as f:
        raw = json.load(f)
    return {"scenes": raw.get("scenes", {}), "fit": raw.get("fit", {})}


_PRESETS = _load_presets()
SCENE_PRESETS: dict[str, dict] = _PRESETS["scenes"]
FIT_PRESETS: dict[str, dict] = _PRESETS["fit"]


def load_config(cls, source: Optional[str], presets: dict[str, dict], base: Any = None):
    """Resolve a preset name or a key = value file into a `cls` instance

    Args:
        cls: Target dataclass
        source: Preset name, path to a key = value file, or None for defaults
        presets: Preset table to look names up in
        base: Instance whose fields the loaded values override
    """
    if source is None:
        return base if base is not None else cls()
    if source in presets:
        return build_dataclass(cls, dict(presets[source]), base=base)
    path = Path(source).expanduser()
    if not path.is_file():
        known = ", ".join(sorted(presets)) or "none"
        raise ConfigError(f"no preset or file named {source!r} (presets: {known})")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    return build_dataclass(cls, parse_kv_config(text), base=base)


# === Run context ===

@dataclass
class RunContext:
    """
    Per-run context for CLI commands

    Thread cap comes from PSTEREO_THREADS; the output directory is created lazily.
    """
    working_directory: Path = field(default_factory=Path.cwd)
    output_directory: Optional[Path] = None
    threads: Optional[int] = field(default_factory=_env_threads)

    def resolve(self, path: str | Path) -> Path:
        """Resolve a path relative to the working directory (supports ~)"""
        p = Path(path).expanduser()
        if not p.is_absolute():
            p = self.working_directory / p
        return p

    @property
    def out(self) -> Path:
        """Output directory, created on first use"""
        if self.output_directory is None:
            raise ConfigError("no output directory given")
        self.output_directory.mkdir(parents=True, exist_ok=True)
        return self.output_directory

    def thread_limits(self):
        """Context manager capping BLAS/OpenMP pools (no-op when uncapped)"""
        from contextlib import nullcontext

        if self.threads is None:
            return nullcontext()
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=self.threads)
