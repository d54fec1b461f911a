"""
Synthetic scene generator

Analytic heightfield primitives rendered under distant point lights with attached
and cast shadows, Phong highlights, diffuse interreflections and sensor noise.
Orthographic camera; pixel (row i, column j) sits at x = j - c_x, y = -(i - c_y)
with c the image centre. Shape parameters are in pixels.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator

from .core import AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap
from .errors import ConfigError
from .geometry import build_facets, interreflection_kernel
from .solvers.interreflection import forward_interreflect

logger = logging.getLogger(__name__)

PRIMITIVES = ("sphere", "concave-bowl", "vase-of-revolution", "plane-with-relief")
_ALIASES = {"bowl": "concave-bowl", "vase": "vase-of-revolution", "relief": "plane-with-relief"}

SHADOW_STEP = 0.5
SHADOW_TOL = 0.05


@dataclass(frozen=True)
class SceneSpec:
    """Plain-text configurable description of a synthetic scene"""
    primitive: str = "sphere"
    resolution: int = 64
    radius: Optional[float] = None
    depth: Optional[float] = None
    profile: tuple[tuple[float, ...], ...] = ()
    relief: tuple[tuple[float, ...], ...] = ()
    albedo: float = 0.7
    tint: tuple[float, ...] = (1.0, 0.85, 0.7)
    channels: int = 1
    specular: float = 0.3
    shininess: float = 32.0
    lights: int = 16
    light_layout: str = "ring"
    slant_min: float = 20.0
    slant_max: float = 55.0
    intensities: tuple[float, ...] = (1.0,)
    noise: float = 0.0
    interreflection: bool = True
    seed: int = 0
    factor: int = 4

    def __post_init__(self):
        primitive = _ALIASES.get(self.primitive, self.primitive)
        if primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r} (choose from {', '.join(PRIMITIVES)})")
        object.__setattr__(self, "primitive", primitive)
        if self.resolution < 16:
            raise ValueError(f"resolution must be >= 16, got {self.resolution}")
        if not 0.0 <= self.albedo < 1.0:
            raise ValueError(f"albedo must lie in [0, 1), got {self.albedo}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.channels == 3 and (len(self.tint) != 3 or max(self.tint) * self.albedo >= 1.0):
            raise ValueError("tint needs three factors keeping albedo below 1")
        if self.specular < 0:
            raise ValueError(f"specular weight must be >= 0, got {self.specular}")
        if self.shininess < 1:
            raise ValueError(f"shininess must be >= 1, got {self.shininess}")
        if self.lights < 3:
            raise ValueError(f"need at least 3 lights, got {self.lights}")
        if self.light_layout not in ("ring", "random"):
            raise ValueError(f"light_layout must be ring or random, got {self.light_layout!r}")
        if not 0.0 <= self.slant_min <= self.slant_max < 90.0:
            raise ValueError("slants must satisfy 0 <= slant_min <= slant_max < 90")
        if len(self.intensities) not in (1, 2) or min(self.intensities) <= 0:
            raise ValueError("intensities: one positive value or a positive range lo, hi")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")

    @property
    def albedo_channels(self) -> np.ndarray:
        if self.channels == 1:
            return np.array([self.albedo])
        return self.albedo * np.asarray(self.tint, dtype=np.float64)


class Scene(NamedTuple):
    depth: DepthMap
    normals: NormalMap
    mask: np.ndarray


# === Geometry ===

def pixel_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame x, y of every pixel centre"""
    c = (resolution - 1) / 2.0
    rows, cols = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    return cols - c, -(rows - c)


def _sphere(spec: SceneSpec, x, y):
    R = spec.radius or 0.45 * spec.resolution
    r2 = x * x + y * y
    mask = r2 < R * R
    D = np.sqrt(np.clip(R * R - r2, 0.0, None))
    n = np.stack([x, y, D], axis=-1) / R
    return D, n, mask


def _bowl(spec: SceneSpec, x, y):
    """Spherical cavity of rim radius a and depth h cut into the plane z = 0"""
    a = spec.radius or 0.45 * spec.resolution
    h = spec.depth if spec.depth is not None else 0.6 * a
    if not 0 < h <= a:
        raise ConfigError(f"bowl depth must lie in (0, radius], got {h}")
    Rs = (a * a + h * h) / (2 * h)
    r2 = x * x + y * y
    mask = r2 < a * a
    s = np.sqrt(np.clip(Rs * Rs - r2, 0.0, None))
    D = (Rs - h) - s
    n = np.stack([-x, -y, s], axis=-1) / Rs
    return D, n, mask


def _default_profile(resolution: int) -> tuple[tuple[float, ...], ...]:
    half = 0.45 * resolution
    return (
        (-half, 0.28 * resolution),
        (-0.3 * half, 0.40 * resolution),
        (0.45 * half, 0.16 * resolution),
        (half, 0.26 * resolution),
    )


def _vase(spec: SceneSpec, x, y):
    """Surface of revolution about the image's vertical axis, radius rho(y)"""
    points = spec.profile or _default_profile(spec.resolution)
    if len(points) < 2 or any(len(p) != 2 for p in points):
        raise ConfigError("degenerate profile: need at least two y:radius control points")
    py = np.array([p[0] for p in points], dtype=np.float64)
    pr = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(np.diff(py) <= 0):
        raise ConfigError("degenerate profile: control point heights must increase")
    if np.any(pr <= 0):
        raise ConfigError("degenerate profile: radii must be positive")
    curve = PchipInterpolator(py, pr, extrapolate=False)
    slope = curve.derivative()

    inside_y = (y >= py[0]) & (y <= py[-1])
    rho = np.where(inside_y, np.nan_to_num(curve(np.clip(y, py[0], py[-1]))), 0.0)
    drho = np.where(inside_y, np.nan_to_num(slope(np.clip(y, py[0], py[-1]))), 0.0)
    mask = inside_y & (np.abs(x) < rho)
    D = np.sqrt(np.clip(rho * rho - x * x, 0.0, None))
    n = np.stack([x, -rho * drho, D], axis=-1)
    return D, n, mask


def _default_relief(resolution: int) -> tuple[tuple[float, ...], ...]:
    s = resolution
    return (
        (0.0, 0.0, -0.18 * s, 0.14 * s),
        (-0.25 * s, 0.22 * s, 0.08 * s, 0.08 * s),
        (0.24 * s, -0.2 * s, 0.06 * s, 0.07 * s),
    )


def _relief(spec: SceneSpec, x, y):
    """Plane z = 0 with Gaussian bumps (amp > 0) and dents (amp < 0)"""
    bumps = spec.relief or _default_relief(spec.resolution)
    D = np.zeros_like(x)
    Dx = np.zeros_like(x)
    Dy = np.zeros_like(x)
    for bump in bumps:
        if len(bump) != 4 or bump[3] <= 0:
            raise ConfigError("relief control points are x:y:amplitude:sigma with sigma > 0")
        bx, by, amp, sigma = bump
        g = amp * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * sigma * sigma))
        D += g
        Dx += -g * (x - bx) / (sigma * sigma)
        Dy += -g * (y - by) / (sigma * sigma)
    mask = np.ones(x.shape, dtype=bool)
    n = np.stack([-Dx, -Dy, np.ones_like(x)], axis=-1)
    return D, n, mask


_BUILDERS = {
    "sphere": _sphere,
    "concave-bowl": _bowl,
    "vase-of-revolution": _vase,
    "plane-with-relief": _relief,
}


def make_scene(spec: SceneSpec) -> Scene:
    """Sample the primitive's analytic heightfield and normals at pixel centres"""
    x, y = pixel_grid(spec.resolution)
    D, n, mask = _BUILDERS[spec.primitive](spec, x, y)
    if not mask.any():
        raise ConfigError(f"{spec.primitive}: shape covers no pixel")
    D = np.where(mask, D, 0.0)
    n = np.where(mask[..., None], n, 0.0)
    return Scene(DepthMap(D, mask), NormalMap.from_vectors(n, mask), mask)


# === Lights ===

def _from_slant(slant: np.ndarray, azimuth: np.ndarray) -> np.ndarray:
    return np.stack([
        np.sin(slant) * np.cos(azimuth),
        np.sin(slant) * np.sin(azimuth),
        np.cos(slant),
    ], axis=1)


def ring_lights(n: int, slant_min: float = 20.0, slant_max: float = 55.0) -> np.ndarray:
    """Two interleaved rings of evenly spaced azimuths (degrees in, unit rows out)"""
    k = np.arange(n)
    azimuth = 2 * np.pi * k / n
    slant = np.radians(np.where(k % 2 == 0, slant_max, slant_min))
    return _from_slant(slant, azimuth)


def random_lights(n: int, rng: np.random.Generator, max_slant: float = 60.0) -> np.ndarray:
    """Uniform directions on the spherical cap of the given slant (degrees)"""
    cos_s = rng.uniform(math.cos(math.radians(max_slant)), 1.0, size=n)
    azimuth = rng.uniform(0.0, 2 * np.pi, size=n)
    return _from_slant(np.arccos(cos_s), azimuth)


def make_lights(spec: SceneSpec) -> LightSet:
    rng = np.random.default_rng(spec.seed)
    if spec.light_layout == "ring":
        dirs = ring_lights(spec.lights, spec.slant_min, spec.slant_max)
    else:
        dirs = random_lights(spec.lights, rng, spec.slant_max)
    if len(spec.intensities) == 1:
        e = np.full(spec.lights, spec.intensities[0])
    else:
        lo, hi = spec.intensities
        e = rng.uniform(lo, hi, size=spec.lights)
    return LightSet.from_vectors(dirs, e)


# === Rendering ===

def cast_shadow(depth: DepthMap, l: np.ndarray, step: float = SHADOW_STEP, tol: float = SHADOW_TOL) -> np.ndarray:
    """Visibility of light l from every masked pixel (1 lit, 0 shadowed)

    Marches toward the light over the heightfield (zero outside the mask) in steps
    of `step` pixels, sampling it bilinearly.
    """
    D = depth.depth
    mask = depth.mask
    h, w = D.shape
    zeta = np.zeros((h, w))
    zeta[mask] = 1.0
    horiz = math.hypot(l[0], l[1])
    if horiz < 1e-12:
        return zeta
    rows, cols = np.nonzero(mask)
    z0 = D[rows, cols]
    top = float(D.max())
    dt = step / horiz
    lit = np.ones(len(rows), dtype=bool)
    active = np.ones(len(rows), dtype=bool)
    s = 1
    while active.any():
        t = s * dt
        r = rows - t * l[1]
        c = cols + t * l[0]
        z = z0 + t * l[2]
        active &= (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1) & (z <= top + tol)
        idx = np.flatnonzero(active)
        if idx.size:
            surface = ndimage.map_coordinates(D, [r[idx], c[idx]], order=1, mode="nearest")
            hit = surface > z[idx] + tol
            lit[idx[hit]] = False
            active[idx[hit]] = False
        s += 1
    zeta[rows, cols] = lit.astype(np.float64)
    return zeta


def specular_lobe(normals: np.ndarray, l: np.ndarray, shininess: float) -> np.ndarray:
    """Phong term max(r.v, 0)^alpha with r = 2 (n.l) n - l, gated by n.l > 0"""
    ndotl = normals @ l
    r_z = 2.0 * ndotl * normals[..., 2] - l[2]
    lobe = np.maximum(r_z, 0.0) ** shininess
    return np.where(ndotl > 0, lobe, 0.0)


def render_scene(scene: Scene, lights: LightSet, spec: SceneSpec = SceneSpec()) -> ImageStack:
    """Images of the scene under each light

    diffuse = e rho max(n.l, 0) zeta (+ interreflected correction), specular =
    e k_s max(r.v, 0)^alpha zeta added after the exchange, white in every channel.
    """
    mask = scene.mask
    N = scene.normals.normals
    h, w = mask.shape
    rho = spec.albedo_channels
    n = lights.n

    direct = np.zeros((n, h, w))
    spec_term = np.zeros((n, h, w))
    for i, (l, e) in enumerate(zip(lights.directions, lights.intensities)):
        zeta = cast_shadow(scene.depth, l)
        shading = np.maximum(N @ l, 0.0) * zeta
        direct[i] = e * spec.albedo * shading
        if spec.specular > 0:
            spec_term[i] = e * spec.specular * specular_lobe(N, l, spec.shininess) * zeta

    correction = np.zeros((n, h, w))
    if spec.interreflection and spec.albedo > 0:
        albedo = AlbedoMap.clamped(np.full((h, w), spec.albedo), mask)
        fs = build_facets(scene.normals, albedo, mask, factor=spec.factor, depth=scene.depth)
        if fs.k >= 2:
            K = interreflection_kernel(fs)
            Xs = fs.downsample(np.moveaxis(direct, 0, -1))         # k x n
            X = forward_interreflect(Xs, fs.albedo / math.pi, K)
            bounce = np.maximum(X - Xs, 0.0)
            correction = np.moveaxis(fs.upsample(bounce), -1, 0)
            logger.debug("interreflection: %d facets, mean gain %.4f", fs.k, float(bounce.mean()))

    diffuse = direct + correction
    images = diffuse[..., None] * (rho / spec.albedo if spec.albedo > 0 else np.ones_like(rho))
    images = images + spec_term[..., None]
    images = np.where(mask[None, :, :, None], images, 0.0)
    return ImageStack(np.maximum(images, 0.0), mask)


def add_noise(stack: ImageStack, sigma: float, seed: int = 0) -> ImageStack:
    """Add i.i.d. N(0, sigma^2) noise and clamp at 0; deterministic per seed"""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return stack
    rng = np.random.default_rng(seed)
    noisy = stack.images + rng.normal(0.0, sigma, size=stack.images.shape)
    return stack.with_images(np.maximum(noisy, 0.0))


def simulate(spec: SceneSpec) -> tuple[ImageStack, LightSet, Scene]:
    """Scene, lights and (noisy) rendered stack for one SceneSpec"""
    scene = make_scene(spec)
    lights = make_lights(spec)
    stack = render_scene(scene, lights, spec)
    stack = add_noise(stack, spec.noise, spec.seed)
    logger.info("rendered %s: %d images at %dx%d, %d masked pixels",
                spec.primitive, stack.n, stack.h, stack.w, stack.m)
    return stack, lights, scene
