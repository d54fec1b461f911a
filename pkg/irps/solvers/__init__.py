"""
IRPS Solvers

Exports the normal-estimation methods and the SOLVERS registry used by the
pipeline. Every registry entry is a generator function
(stack, lights, options) -> SolveOutcome that yields progress items
(nayar round tuples, LossRecord, FitEvent) while it runs.
"""

from dataclasses import dataclass, field
from typing import Callable, Generator, Optional

from ..core import AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap
from ..geometry import integrate_depth, normals_to_gradients
from .classic import (
    AZIMUTH_BINS,
    ELEVATION_BINS,
    INTENSITY_BINS,
    INTENSITY_RANGE,
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
from .interreflection import (
    InterreflectionOperator,
    forward_interreflect,
    nayar_correct,
    nayar_iterate,
    nayar_update,
    spectral_radius,
)
from .irnet import FitConfig, FitEvent, FitResult, LossRecord, fit, fit_iter
from .robustinit import (
    RpcaResult,
    normals_from_lowrank,
    partial_svt,
    robust_initialize,
    rpca_partial_sum,
    soft_threshold,
)


@dataclass(frozen=True)
class SolveOptions:
    """Method settings shared by the registry entries"""
    nayar_iters: int = 15
    factor: int = 4
    init: str = "robust"
    fit: FitConfig = field(default_factory=FitConfig)
    normals_gt: Optional[NormalMap] = None

    def __post_init__(self):
        if self.init not in ("robust", "woodham"):
            raise ValueError(f"init must be robust or woodham, got {self.init!r}")


@dataclass
class SolveOutcome:
    normals: NormalMap
    albedo: Optional[AlbedoMap] = None
    depth: Optional[DepthMap] = None
    fit: Optional[FitResult] = None


SolveGen = Generator[object, None, SolveOutcome]


def _with_depth(normals: NormalMap) -> DepthMap:
    G, _ = normals_to_gradients(normals)
    return integrate_depth(G, normals.mask)


def run_woodham(stack: ImageStack, lights: LightSet, options: SolveOptions) -> SolveGen:
    normals, albedo = woodham_solve(stack, lights)
    yield from ()
    return SolveOutcome(normals, albedo, _with_depth(normals))


def run_robust(stack: ImageStack, lights: LightSet, options: SolveOptions) -> SolveGen:
    normals, albedo, result = robust_initialize(stack, lights)
    yield ("rpca", result.iterations, result.residual)
    return SolveOutcome(normals, albedo, _with_depth(normals))


def run_nayar(stack: ImageStack, lights: LightSet, options: SolveOptions) -> SolveGen:
    rounds: list[tuple[str, int, float]] = []
    normals, albedo, depth = nayar_iterate(
        stack,
        lights,
        iters=options.nayar_iters,
        factor=options.factor,
        on_round=lambda t, delta: rounds.append(("nayar", t, delta)),
    )
    yield from rounds
    return SolveOutcome(normals, albedo, depth)


def run_irnet(stack: ImageStack, lights: LightSet, options: SolveOptions) -> SolveGen:
    if options.init == "robust":
        normals_init, albedo_init, _ = robust_initialize(stack, lights)
    else:
        normals_init, albedo_init = woodham_solve(stack, lights)
    result = yield from fit_iter(stack, lights, normals_init, albedo_init, options.fit, options.normals_gt)
    return SolveOutcome(result.normals_ny, None, result.depth, result)


SOLVERS: dict[str, Callable[[ImageStack, LightSet, SolveOptions], SolveGen]] = {
    "woodham": run_woodham,
    "robust": run_robust,
    "nayar": run_nayar,
    "irnet": run_irnet,
}

__all__ = [
    # Registry
    "SOLVERS",
    "SolveOptions",
    "SolveOutcome",
    # Classic
    "AZIMUTH_BINS",
    "ELEVATION_BINS",
    "INTENSITY_BINS",
    "INTENSITY_RANGE",
    "scaled_normals",
    "woodham_solve",
    "direction_angles",
    "bin_direction",
    "bin_intensity",
    "direction_bin_center",
    "intensity_bin_center",
    "sphere_normals",
    "calibrate_from_sphere",
    # Robust initialization
    "RpcaResult",
    "soft_threshold",
    "partial_svt",
    "rpca_partial_sum",
    "normals_from_lowrank",
    "robust_initialize",
    # Interreflection
    "InterreflectionOperator",
    "spectral_radius",
    "forward_interreflect",
    "nayar_update",
    "nayar_correct",
    "nayar_iterate",
    # Inverse-rendering network
    "FitConfig",
    "FitEvent",
    "FitResult",
    "LossRecord",
    "fit",
    "fit_iter",
]
