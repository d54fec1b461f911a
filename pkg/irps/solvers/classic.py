"""
Classical Lambertian photometric stereo, light-source discretization and
calibration-sphere light estimation.
"""

import logging
import math

import numpy as np

from ..core import VIEW, AlbedoMap, ImageStack, LightSet, NormalMap, ALBEDO_MAX
from ..errors import CalibrationError, DegenerateLightsError

logger = logging.getLogger(__name__)

# Source-space discretization
AZIMUTH_BINS = 36
ELEVATION_BINS = 36
INTENSITY_BINS = 20
INTENSITY_RANGE = (0.2, 2.0)
_BIN_TOL = 1e-9

SHADOW_FRACTION = 0.01


def _require_rank3(light_matrix: np.ndarray) -> None:
    if light_matrix.shape[0] < 3 or np.linalg.matrix_rank(light_matrix) < 3:
        raise DegenerateLightsError("degenerate light configuration")


def scaled_normals(
    stack: ImageStack,
    lights: LightSet,
    shadow_fraction: float = SHADOW_FRACTION,
) -> np.ndarray:
    """Per-pixel least squares of X = b^T L, b = rho n, for every channel

    Lights darker than `shadow_fraction` of an image's maximum are dropped from a
    pixel's system while at least three well-conditioned lights remain.

    Returns:
        m x 3 x c unclamped albedo-scaled normals over the masked pixels
    """
    if lights.n != stack.n:
        raise ValueError(f"{lights.n} lights for {stack.n} images")
    S = lights.scaled()
    _require_rank3(S)

    gray = stack.gray()                                    # m x n
    peaks = gray.max(axis=0)
    valid = gray >= shadow_fraction * peaks[None, :]

    m = gray.shape[0]
    B = np.zeros((m, 3, stack.c))
    channels = [stack.matrix(k) for k in range(stack.c)]  # c x (m x n)

    patterns, inverse = np.unique(valid, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for p, pattern in enumerate(patterns):
        rows = np.flatnonzero(inverse == p)
        use = pattern
        if use.sum() < 3 or np.linalg.matrix_rank(S[use]) < 3:
            use = np.ones(stack.n, dtype=bool)
        pinv = np.linalg.pinv(S[use])                      # 3 x n_use
        for k, X in enumerate(channels):
            B[rows, :, k] = X[np.ix_(rows, use)] @ pinv.T
    return B


def woodham_solve(
    stack: ImageStack,
    lights: LightSet,
    shadow_fraction: float = SHADOW_FRACTION,
) -> tuple[NormalMap, AlbedoMap]:
    """Lambertian normals and albedo; albedo clamped to [0, 1 - 1e-6]"""
    B = scaled_normals(stack, lights, shadow_fraction)
    b = B.sum(axis=2)
    albedo_c = np.linalg.norm(B, axis=1)                   # m x c
    normals = np.zeros(stack.mask.shape + (3,))
    norms = np.linalg.norm(b, axis=1)
    dark = norms == 0
    if dark.any():
        logger.warning("%d pixels with zero signal; assigning the view direction", int(dark.sum()))
        b[dark] = VIEW
    normals[stack.mask] = b
    albedo = np.zeros(stack.mask.shape + (stack.c,))
    albedo[stack.mask] = np.clip(albedo_c, 0.0, ALBEDO_MAX)
    return NormalMap.from_vectors(normals, stack.mask), AlbedoMap(albedo, stack.mask)


# === Source-space discretization ===

def direction_angles(l: np.ndarray) -> tuple[float, float]:
    """Azimuth phi = atan2(l_z, l_x) in [0, pi], elevation theta = asin(l_y)"""
    l = np.asarray(l, dtype=np.float64)
    if l[2] < 0:
        raise ValueError("source behind object plane")
    phi = math.atan2(l[2], l[0])
    theta = math.asin(float(np.clip(l[1], -1.0, 1.0)))
    return phi, theta


def _uniform_bin(value: float, low: float, width: float, count: int) -> int:
    # right-open intervals; the top edge belongs to the last bin
    idx = math.floor((value - low) / width + _BIN_TOL)
    return int(min(max(idx, 0), count - 1))


def bin_direction(l: np.ndarray) -> tuple[int, int]:
    """(azimuth_bin, elevation_bin), each in [0, 36)"""
    phi, theta = direction_angles(l)
    az = _uniform_bin(phi, 0.0, math.pi / AZIMUTH_BINS, AZIMUTH_BINS)
    el = _uniform_bin(theta, -math.pi / 2, math.pi / ELEVATION_BINS, ELEVATION_BINS)
    return az, el


def direction_bin_center(az: int, el: int) -> np.ndarray:
    """Unit vector at the centre of a direction bin"""
    phi = (az + 0.5) * math.pi / AZIMUTH_BINS
    theta = -math.pi / 2 + (el + 0.5) * math.pi / ELEVATION_BINS
    return np.array([
        math.cos(theta) * math.cos(phi),
        math.sin(theta),
        math.cos(theta) * math.sin(phi),
    ])


def bin_intensity(e: float) -> int:
    """Intensity bin in [0, 20) over [0.2, 2.0]"""
    low, high = INTENSITY_RANGE
    if not (low <= e <= high):
        raise ValueError(f"intensity {e} outside the valid interval [{low}, {high}]")
    width = (high - low) / INTENSITY_BINS
    return _uniform_bin(e, low, width, INTENSITY_BINS)


def intensity_bin_center(index: int) -> float:
    low, high = INTENSITY_RANGE
    width = (high - low) / INTENSITY_BINS
    return low + (index + 0.5) * width


# === Calibration sphere ===

def sphere_normals(shape: tuple[int, int], center: tuple[float, float], radius: float):
    """Analytic normals of a sphere silhouette in pixel coordinates

    Returns:
        (normals h x w x 3, inside mask)
    """
    h, w = shape
    cx, cy = center
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (cols - cx) / radius
    y = -(rows - cy) / radius
    r2 = x * x + y * y
    inside = r2 < 1.0
    normals = np.zeros((h, w, 3))
    normals[..., 0] = np.where(inside, x, 0.0)
    normals[..., 1] = np.where(inside, y, 0.0)
    normals[..., 2] = np.where(inside, np.sqrt(np.clip(1.0 - r2, 0.0, None)), 0.0)
    return normals, inside


def reflect_view(n: np.ndarray) -> np.ndarray:
    """Light direction whose mirror reflection about n is the view: 2 (n.v) n - v"""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    l = 2.0 * float(n @ VIEW) * n - VIEW
    return l / np.linalg.norm(l)


def _top_fraction(values: np.ndarray, fraction: float, min_count: int) -> np.ndarray:
    count = max(min_count, int(math.ceil(fraction * values.size)))
    count = min(count, values.size)
    return np.argpartition(values, values.size - count)[values.size - count:]


def _fit_intensity(I: np.ndarray, shading: np.ndarray) -> tuple[float, float]:
    """Least squares e for I ~ e * shading; returns (e, relative rms residual)"""
    lit = shading > 0
    denom = float(shading[lit] @ shading[lit])
    if denom <= 0:
        return 0.0, math.inf
    e = float(I[lit] @ shading[lit]) / denom
    resid = I[lit] - e * shading[lit]
    scale = float(np.sqrt(np.mean(I[lit] ** 2))) or 1.0
    return e, float(np.sqrt(np.mean(resid ** 2))) / scale


def calibrate_from_sphere(
    stack: ImageStack,
    center: tuple[float, float],
    radius: float,
    albedo: float = 1.0,
    highlight_fraction: float = 0.001,
    specular_cut: float = 0.05,
    lobe_exclusion_deg: float = 25.0,
    min_highlight_pixels: int = 5,
    background: float = 1e-6,
    min_excess: float = 0.05,
    max_fit_residual: float = 0.10,
) -> LightSet:
    """Estimate light directions and intensities from a glossy calibration sphere

    Args:
        stack: Images of the sphere
        center: Sphere centre (column, row) in pixels
        radius: Sphere radius in pixels
        albedo: Diffuse albedo of the sphere; intensities are relative to it

    Raises:
        CalibrationError: an image shows no specular highlight
    """
    normals, inside = sphere_normals(stack.mask.shape, center, radius)
    # stay off the silhouette where the analytic normal is grazing
    inside &= normals[..., 2] > 0.1
    if not inside.any():
        raise CalibrationError("sphere does not cover any pixel")
    if np.any(inside & ~stack.mask):
        raise CalibrationError("sphere is not fully inside the mask")
    N = normals[inside]                                      # p x 3

    directions = np.zeros((stack.n, 3))
    intensities = np.zeros(stack.n)
    for i in range(stack.n):
        I = stack.images[i][inside].mean(axis=1)
        if I.max() <= background:
            raise CalibrationError(f"no highlight found in image {i + 1}")

        # first pass: brightest pixels locate the highlight
        top = _top_fraction(I, highlight_fraction, min_highlight_pixels)
        n_h = N[top].mean(axis=0)
        l = reflect_view(n_h)

        for _ in range(2):
            n_h_unit = n_h / np.linalg.norm(n_h)
            off_lobe = N @ n_h_unit < math.cos(math.radians(lobe_exclusion_deg))
            off_lobe[_top_fraction(I, specular_cut, 1)] = False
            shading = albedo * np.maximum(N @ l, 0.0)
            e, fit_resid = _fit_intensity(I[off_lobe], shading[off_lobe])

            # refinement: residual above the Lambertian prediction is the specular lobe
            resid = I - e * shading
            top = _top_fraction(resid, highlight_fraction, min_highlight_pixels)
            weights = np.clip(resid[top], 0.0, None)
            if weights.sum() <= 0:
                break
            n_h = (weights[:, None] * N[top]).sum(axis=0)
            l = reflect_view(n_h)

        shading = albedo * np.maximum(N @ l, 0.0)
        n_h_unit = n_h / np.linalg.norm(n_h)
        off_lobe = N @ n_h_unit < math.cos(math.radians(lobe_exclusion_deg))
        off_lobe[_top_fraction(I, specular_cut, 1)] = False
        e, fit_resid = _fit_intensity(I[off_lobe], shading[off_lobe])

        peak = I[top].mean()
        predicted = e * shading[top].mean()
        if e <= 0 or fit_resid > max_fit_residual or peak < (1.0 + min_excess) * predicted:
            raise CalibrationError(f"no highlight found in image {i + 1}")
        directions[i] = l
        intensities[i] = e
        logger.debug("image %d: l=%s e=%.4f fit residual %.3g", i + 1, np.round(l, 4), e, fit_resid)

    return LightSet(directions, intensities)
