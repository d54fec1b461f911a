"""
Dataset I/O

DiLiGenT-compatible directory layout:

    <root>/
    ├── 001.png ... 0NN.png       # images (8/16-bit raster) or 001.fmap ... (float maps)
    ├── mask.png                  # object mask (nonzero = object)
    ├── light_directions.txt      # optional: "x y z" per line
    ├── light_intensities.txt     # optional: "e" or "r g b" per line
    └── normal_gt.fmap            # optional: ground-truth normals

Float map (.fmap) format, little-endian:
    magic b"FMAP" | uint32 h | uint32 w | uint32 k | h*w*k float32 row-major
"""

import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import cv2
import numpy as np

from .core import ImageStack, LightSet, NormalMap, encode_normals
from .errors import DatasetError

logger = logging.getLogger(__name__)

FMAP_MAGIC = b"FMAP"
_HEADER = np.dtype([("magic", "S4"), ("h", "<u4"), ("w", "<u4"), ("k", "<u4")])
_IMAGE_EXTS = (".png", ".tif", ".tiff", ".fmap")
_IMAGE_STEM = re.compile(r"^\d+$")

LIGHT_DIRECTIONS = "light_directions.txt"
LIGHT_INTENSITIES = "light_intensities.txt"
NORMAL_GT = "normal_gt.fmap"
MASK = "mask.png"


# === Float maps ===

def write_float_map(path: str | Path, field: np.ndarray) -> None:
    """Write an h x w x k (or h x w) field as a float map

    Raises:
        ValueError: non-finite values or wrong rank
    """
    arr = np.asarray(field)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"float map must be h x w x k, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("float map values must be finite")
    header = np.array([(FMAP_MAGIC, *arr.shape)], dtype=_HEADER)
    data = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(data.tobytes())


def read_float_map(path: str | Path) -> np.ndarray:
    """Read a float map as an h x w x k float32 array"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read float map {path}: {e}")
    if len(raw) < _HEADER.itemsize:
        raise DatasetError(f"corrupt float map header in {path}: file too short")
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if header["magic"] != FMAP_MAGIC:
        raise DatasetError(f"corrupt float map header in {path}: bad magic {header['magic']!r}")
    h, w, k = int(header["h"]), int(header["w"]), int(header["k"])
    expected = h * w * k * 4
    payload = raw[_HEADER.itemsize:]
    if h == 0 or w == 0 or k == 0 or len(payload) != expected:
        raise DatasetError(
            f"corrupt float map header in {path}: dims {h}x{w}x{k} need {expected} bytes, "
            f"found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, k).copy()


# === Rasters ===

def read_raster(path: str | Path) -> np.ndarray:
    """Read an image as h x w x c linear floats in [0, 1] (float maps returned as stored)"""
    path = Path(path)
    if path.suffix.lower() == ".fmap":
        return read_float_map(path).astype(np.float64)
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot decode image {path}")
    if img.ndim == 3:
        # OpenCV stores BGR(A)
        img = img[..., :3][..., ::-1]
    else:
        img = img[..., None]
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    if img.dtype in (np.float32, np.float64):
        return img.astype(np.float64)
    raise DatasetError(f"unsupported pixel type {img.dtype} in {path}")


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write h x w x {1,3} uint8/uint16 codes as PNG"""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr[..., ::-1]
    elif arr.ndim == 3:
        arr = arr[..., 0]
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr)):
        raise DatasetError(f"cannot write image {path}")


def read_mask(path: str | Path) -> np.ndarray:
    """Object mask: any nonzero channel marks the object"""
    img = read_raster(path)
    return np.any(img > 0, axis=2)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.where(mask, 255, 0).astype(np.uint8))


# === Lights ===

def _read_rows(path: Path, what: str) -> list[list[float]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot read {what} file {path}: {e}")
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric {what} row {line.strip()!r}")
    return rows


def read_lights(directions_path: Path, intensities_path: Optional[Path], n: int) -> LightSet:
    """Parse light files; rows are renormalized, per-channel intensities averaged"""
    rows = _read_rows(directions_path, "light direction")
    if len(rows) != n:
        raise DatasetError(f"dimension mismatch: {n} images but {len(rows)} light directions")
    dirs = np.zeros((n, 3))
    for i, row in enumerate(rows):
        if len(row) != 3:
            raise DatasetError(f"{directions_path}:{i + 1}: expected 'x y z', got {len(row)} values")
        norm = np.linalg.norm(row)
        if norm == 0:
            raise DatasetError(f"{directions_path}:{i + 1}: zero-length light direction")
        dirs[i] = np.asarray(row) / norm

    if intensities_path is None:
        return LightSet(dirs, np.ones(n))
    rows = _read_rows(intensities_path, "light intensity")
    if len(rows) != n:
        raise DatasetError(f"dimension mismatch: {n} images but {len(rows)} light intensities")
    intens = np.zeros(n)
    for i, row in enumerate(rows):
        if len(row) not in (1, 3):
            raise DatasetError(f"{intensities_path}:{i + 1}: expected 1 or 3 values, got {len(row)}")
        # grayscale intensity model: per-channel triples collapse to their mean
        intens[i] = float(np.mean(row))
        if not intens[i] > 0:
            raise DatasetError(f"{intensities_path}:{i + 1}: intensity must be positive")
    return LightSet(dirs, intens)


def write_lights(directory: str | Path, lights: LightSet) -> tuple[Path, Path]:
    """Write light_directions.txt / light_intensities.txt"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dpath = directory / LIGHT_DIRECTIONS
    ipath = directory / LIGHT_INTENSITIES
    dpath.write_text(
        "".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in lights.directions), encoding="utf-8"
    )
    ipath.write_text("".join(f"{e:.17g}\n" for e in lights.intensities), encoding="utf-8")
    return dpath, ipath


# === Dataset ===

@dataclass(frozen=True)
class DatasetDescriptor:
    """Files making up one dataset directory"""
    root: Path
    images: tuple[str, ...]
    mask: Optional[str] = MASK
    light_directions: Optional[str] = None
    light_intensities: Optional[str] = None
    normal_gt: Optional[str] = None

    def __post_init__(self):
        if not self.images:
            raise DatasetError(f"no images in {self.root}")

    @classmethod
    def discover(cls, root: str | Path) -> "DatasetDescriptor":
        """Scan a directory for the DiLiGenT-style layout"""
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"dataset directory not found: {root}")
        images = sorted(
            p.name for p in root.iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_EXTS and _IMAGE_STEM.match(p.stem)
        )

        def optional(*names: str) -> Optional[str]:
            for name in names:
                if (root / name).is_file():
                    return name
            return None

        return cls(
            root=root,
            images=tuple(images),
            mask=optional(MASK, "mask.fmap"),
            light_directions=optional(LIGHT_DIRECTIONS),
            light_intensities=optional(LIGHT_INTENSITIES),
            normal_gt=optional(NORMAL_GT, "normal_gt.png"),
        )

    def path(self, name: str) -> Path:
        return self.root / name


def read_dataset(
    desc: DatasetDescriptor,
) -> tuple[ImageStack, Optional[LightSet], Optional[NormalMap]]:
    """Load images, mask and the optional light / ground-truth files"""
    images = []
    shape = None
    for name in desc.images:
        img = read_raster(desc.path(name))
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DatasetError(f"dimension mismatch: {name} is {img.shape}, expected {shape}")
        images.append(img)
    stack_arr = np.stack(images)

    if desc.mask is not None:
        mask = read_mask(desc.path(desc.mask))
        if mask.shape != shape[:2]:
            raise DatasetError(f"dimension mismatch: mask is {mask.shape}, images are {shape[:2]}")
    else:
        mask = np.ones(shape[:2], dtype=bool)

    try:
        stack = ImageStack(stack_arr, mask)
    except ValueError as e:
        raise DatasetError(str(e))

    lights = None
    if desc.light_directions is not None:
        lights = read_lights(
            desc.path(desc.light_directions),
            desc.path(desc.light_intensities) if desc.light_intensities else None,
            stack.n,
        )

    gt = None
    if desc.normal_gt is not None:
        gt_path = desc.path(desc.normal_gt)
        if gt_path.suffix == ".fmap":
            vectors = read_float_map(gt_path).astype(np.float64)
        else:
            vectors = read_raster(gt_path)[..., :3] * 2.0 - 1.0
        if vectors.shape != shape[:2] + (3,):
            raise DatasetError(f"dimension mismatch: ground truth is {vectors.shape[:2]}, images are {shape[:2]}")
        gt = NormalMap.from_vectors(vectors, mask)

    logger.info("read %d images (%dx%d, c=%d, m=%d) from %s",
                stack.n, stack.h, stack.w, stack.c, stack.m, desc.root)
    return stack, lights, gt


def write_dataset(
    root: str | Path,
    stack: ImageStack,
    lights: Optional[LightSet] = None,
    normals_gt: Optional[NormalMap] = None,
    image_format: str = "fmap",
) -> DatasetDescriptor:
    """Write a dataset directory

    image_format "fmap" stores radiance bit-exactly; "png16" scales the stack by
    s = 1/max into 16-bit codes and writes intensities multiplied by s, which keeps
    radiance = intensity x shading consistent.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(stack.n)))
    scale = 1.0
    names = []
    if image_format == "fmap":
        for i in range(stack.n):
            name = f"{i + 1:0{width}d}.fmap"
            write_float_map(root / name, stack.images[i])
            names.append(name)
    elif image_format == "png16":
        peak = float(stack.images.max())
        scale = 1.0 / peak if peak > 0 else 1.0
        for i in range(stack.n):
            name = f"{i + 1:0{width}d}.png"
            codes = np.round(np.clip(stack.images[i] * scale, 0, 1) * 65535).astype(np.uint16)
            write_png(root / name, codes)
            names.append(name)
    else:
        raise ValueError(f"unknown image format {image_format!r} (fmap, png16)")
    write_mask(root / MASK, stack.mask)

    if lights is not None:
        write_lights(root, LightSet(lights.directions, lights.intensities * scale))
    if normals_gt is not None:
        write_float_map(root / NORMAL_GT, normals_gt.normals)
    return DatasetDescriptor.discover(root)


# === Results ===

def write_normal_png(path: str | Path, nm: NormalMap) -> None:
    write_png(path, encode_normals(nm))


def write_loss_trace(path: str | Path, records: Iterable) -> int:
    """CSV with columns iteration, L_rec, L_weak, lambda_w, lr, mae; returns row count"""
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "L_rec", "L_weak", "lambda_w", "lr", "mae"])
        for r in records:
            writer.writerow([
                r.iteration,
                f"{r.rec:.10g}",
                f"{r.weak:.10g}",
                f"{r.lambda_w:.10g}",
                f"{r.lr:.10g}",
                "" if r.mae is None else f"{r.mae:.6f}",
            ])
            count += 1
    return count


def write_fit_events(path: str | Path, events: Iterable) -> int:
    """CSV with columns iteration, kind, detail; returns row count"""
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "kind", "detail"])
        for e in events:
            writer.writerow([e.iteration, e.kind, e.detail])
            count += 1
    return count
