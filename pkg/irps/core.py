"""
Core domain types

Image stacks, light sets and per-pixel geometry / reflectance fields, plus the
normal-map visualization codec and the angular error metric.

Camera frame: x right, y up, z toward the camera; view vector v = (0, 0, 1).
Pixel (row i, column j) lies at x = j, y = -i, so "up" in the image is +y.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError

VIEW = np.array([0.0, 0.0, 1.0])

UNIT_TOL_LIGHT = 1e-9
UNIT_TOL_NORMAL = 1e-6


def _as_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask


@dataclass(frozen=True)
class ImageStack:
    """n images (n x h x w x c, linear radiance) of one scene plus the object mask"""
    images: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4:
            raise ValueError(f"images must be n x h x w x c, got shape {images.shape}")
        if images.shape[3] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {images.shape[3]}")
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain non-finite values")
        if np.any(images < 0):
            raise ValueError("radiance must be nonnegative")
        mask = _as_mask(self.mask)
        if mask.shape != images.shape[1:3]:
            raise ValueError(f"mask shape {mask.shape} != image shape {images.shape[1:3]}")
        if not mask.any():
            raise ValueError("mask has no true pixel")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def h(self) -> int:
        return self.images.shape[1]

    @property
    def w(self) -> int:
        return self.images.shape[2]

    @property
    def c(self) -> int:
        return self.images.shape[3]

    @property
    def m(self) -> int:
        """Number of masked pixels"""
        return int(self.mask.sum())

    def matrix(self, channel: int) -> np.ndarray:
        """m x n matrix of one channel over masked pixels"""
        return self.images[:, self.mask, channel].T

    def gray(self) -> np.ndarray:
        """m x n matrix of channel means over masked pixels"""
        return self.images[:, self.mask, :].mean(axis=2).T

    def with_images(self, images: np.ndarray) -> "ImageStack":
        return ImageStack(images=images, mask=self.mask)


@dataclass(frozen=True)
class LightSet:
    """Per-image unit light directions (n x 3) and positive intensities (n,)"""
    directions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        e = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if d.shape[0] != e.shape[0]:
            raise ValueError(f"{d.shape[0]} directions but {e.shape[0]} intensities")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL_LIGHT):
            raise ValueError("light directions must be unit vectors")
        if np.any(~(e > 0)):
            raise ValueError("light intensities must be positive")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", e)

    @classmethod
    def from_vectors(cls, directions: np.ndarray, intensities=None) -> "LightSet":
        """Renormalize arbitrary nonzero direction rows"""
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-length light direction")
        if intensities is None:
            intensities = np.ones(d.shape[0])
        return cls(directions=d / norms, intensities=intensities)

    @property
    def n(self) -> int:
        return self.directions.shape[0]

    def scaled(self) -> np.ndarray:
        """n x 3 light matrix with intensities folded in"""
        return self.directions * self.intensities[:, None]

    def subset(self, index) -> "LightSet":
        return LightSet(self.directions[index], self.intensities[index])


@dataclass(frozen=True)
class NormalMap:
    """h x w x 3 unit normals inside the mask, zero outside"""
    normals: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        nrm = np.asarray(self.normals, dtype=np.float64)
        mask = _as_mask(self.mask)
        if nrm.shape != mask.shape + (3,):
            raise ValueError(f"normals shape {nrm.shape} does not match mask {mask.shape}")
        inside = nrm[mask]
        if np.any(np.abs(np.linalg.norm(inside, axis=1) - 1.0) > UNIT_TOL_NORMAL):
            raise ValueError("normals must be unit length inside the mask")
        if np.any(inside[:, 2] < -UNIT_TOL_NORMAL):
            raise ValueError("normals must face the camera (n_z >= 0)")
        if np.any(nrm[~mask] != 0):
            raise ValueError("normals outside the mask must be zero")
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, mask: np.ndarray) -> "NormalMap":
        """Normalize raw vectors inside the mask; back-facing vectors fold onto n_z = 0"""
        mask = _as_mask(mask)
        v = np.array(vectors, dtype=np.float64).reshape(mask.shape + (3,))
        inside = v[mask]
        inside[:, 2] = np.maximum(inside[:, 2], 0.0)
        norms = np.linalg.norm(inside, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise SolverError("zero-norm normal")
        out = np.zeros_like(v)
        out[mask] = inside / norms[:, None]
        return cls(normals=out, mask=mask)

    @classmethod
    def constant(cls, normal, mask: np.ndarray) -> "NormalMap":
        mask = _as_mask(mask)
        return cls.from_vectors(np.broadcast_to(np.asarray(normal, float), mask.shape + (3,)), mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def masked(self) -> np.ndarray:
        """m x 3 rows of masked normals"""
        return self.normals[self.mask]


@dataclass(frozen=True)
class DepthMap:
    """h x w depth, finite inside the mask; defined up to an additive constant"""
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        mask = _as_mask(self.mask)
        if d.shape != mask.shape:
            raise ValueError(f"depth shape {d.shape} != mask shape {mask.shape}")
        if not np.all(np.isfinite(d[mask])):
            raise ValueError("depth must be finite inside the mask")
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "mask", mask)


ALBEDO_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class AlbedoMap:
    """h x w x c diffuse albedo in [0, 1)"""
    albedo: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3:
            raise ValueError(f"albedo must be h x w x c, got shape {a.shape}")
        mask = np.ones(a.shape[:2], dtype=bool) if self.mask is None else _as_mask(self.mask)
        inside = a[mask]
        if np.any(inside < 0) or np.any(inside >= 1.0):
            raise ValueError("albedo must lie in [0, 1) inside the mask")
        object.__setattr__(self, "albedo", a)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def clamped(cls, values: np.ndarray, mask: np.ndarray) -> "AlbedoMap":
        a = np.asarray(values, dtype=np.float64)
        if a.ndim == 2:
            a = a[..., None]
        a = np.where(mask[..., None], np.clip(a, 0.0, ALBEDO_MAX), 0.0)
        return cls(albedo=a, mask=mask)

    def gray(self) -> np.ndarray:
        return self.albedo.mean(axis=2)


# === Normal map codec ===

def encode_normals(nm: NormalMap) -> np.ndarray:
    """rgb = round(255 (n + 1) / 2) inside the mask, black outside"""
    codes = np.floor(255.0 * (nm.normals + 1.0) / 2.0 + 0.5)
    codes[~nm.mask] = 0
    return np.clip(codes, 0, 255).astype(np.uint8)


def decode_vectors(img: np.ndarray) -> np.ndarray:
    """Byte codes back to [-1, 1] components (no renormalization)"""
    return np.asarray(img, dtype=np.float64)[..., :3] / 255.0 * 2.0 - 1.0


def decode_normals(img: np.ndarray, mask: np.ndarray) -> NormalMap:
    """Inverse of encode_normals up to quantization"""
    return NormalMap.from_vectors(decode_vectors(img), mask)


# === Metric ===

def angular_error_map(est: NormalMap, gt: NormalMap) -> np.ndarray:
    """Per-pixel angle between two normal maps in degrees (0 outside either mask)"""
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {gt.shape}")
    a, b = est.normals, gt.normals
    # atan2 form equals arccos(clamp(a.b, -1, 1)) for unit vectors and stays accurate near 0
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arctan2(cross, dot))


def mean_angular_error(est: NormalMap, gt: NormalMap, mask: np.ndarray | None = None) -> float:
    """Mean angular error in degrees over the evaluation mask"""
    if mask is None:
        mask = est.mask & gt.mask
    mask = _as_mask(mask)
    if mask.shape != est.shape:
        raise ValueError(f"mask shape {mask.shape} != map shape {est.shape}")
    if not mask.any():
        raise ValueError("no evaluable pixels")
    return float(angular_error_map(est, gt)[mask].mean())
