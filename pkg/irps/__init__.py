"""
IRPS - interreflection-aware photometric stereo

Classical, robust and interreflection-aware normal estimation, a synthetic
scene renderer and a test-time inverse-rendering network built on a small
reverse-mode autodiff engine.
"""

from .core import AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap, mean_angular_error
from .context import RunContext
from .errors import IrpsError
from .pipeline import Pipeline
from .solvers import SOLVERS

__version__ = "0.1.0"

__all__ = [
    "ImageStack",
    "LightSet",
    "NormalMap",
    "DepthMap",
    "AlbedoMap",
    "mean_angular_error",
    "RunContext",
    "IrpsError",
    "Pipeline",
    "SOLVERS",
]
