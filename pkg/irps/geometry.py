"""
Surface geometry

- Gradient fields and least-squares depth integration from normals
- Facet discretization of a normal map (block averaging + resampling operators)
- The pairwise interreflection kernel K with visibility

Positions are in full-resolution pixel units: x = column, y = -row, z = depth.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from .core import AlbedoMap, DepthMap, NormalMap
from .errors import GeometryError, SolverError

logger = logging.getLogger(__name__)

NZ_EPS = 1e-4
CG_RTOL = 1e-8
AREA_CAP = 5.0
_PAIR_CHUNK = 200_000


# === Depth from normals ===

def normals_to_gradients(nm: NormalMap, eps: float = NZ_EPS) -> tuple[np.ndarray, int]:
    """Depth gradients (p, q) = (-n_x / n_z, -n_y / n_z)

    Returns:
        (h x w x 2 gradient field, number of pixels whose n_z was clamped to eps)
    """
    n = nm.normals
    nz = n[..., 2]
    low = nm.mask & (nz <= eps)
    clamped = int(low.sum())
    if clamped:
        logger.warning("%d pixels with n_z <= %g clamped before integration", clamped, eps)
    nz = np.where(low, eps, nz)
    G = np.zeros(nm.shape + (2,))
    inside = nm.mask
    G[inside, 0] = -n[inside, 0] / nz[inside]
    G[inside, 1] = -n[inside, 1] / nz[inside]
    return G, clamped


def _difference_system(G: np.ndarray, mask: np.ndarray):
    """Forward-difference rows between masked 4-neighbours: A D ~ b"""
    h, w = mask.shape
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))

    # x: D[i, j+1] - D[i, j] ~ mean p
    right = mask[:, :-1] & mask[:, 1:]
    i0, j0 = np.nonzero(right)
    bx = 0.5 * (G[i0, j0, 0] + G[i0, j0 + 1, 0])
    ax, bx_idx = index[i0, j0 + 1], index[i0, j0]

    # y points up: D[i-1, j] - D[i, j] ~ mean q
    up = mask[1:, :] & mask[:-1, :]
    i1, j1 = np.nonzero(up)
    by = 0.5 * (G[i1, j1, 1] + G[i1 + 1, j1, 1])
    ay, by_idx = index[i1, j1], index[i1 + 1, j1]

    plus = np.concatenate([ax, ay])
    minus = np.concatenate([bx_idx, by_idx])
    rhs = np.concatenate([bx, by])
    e = len(rhs)
    rows = np.concatenate([np.arange(e), np.arange(e)])
    cols = np.concatenate([plus, minus])
    vals = np.concatenate([np.ones(e), -np.ones(e)])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(e, int(mask.sum())))
    return A, rhs


def integrate_depth(G: np.ndarray, mask: np.ndarray) -> DepthMap:
    """Least-squares depth from a gradient field

    Solves the masked Poisson system A^T A D = A^T b with conjugate gradients; each
    connected component is shifted to zero mean.

    Raises:
        SolverError: CG did not reach the relative residual tolerance
    """
    mask = np.asarray(mask, dtype=bool)
    G = np.asarray(G, dtype=np.float64)
    if G.shape != mask.shape + (2,):
        raise ValueError(f"gradient field shape {G.shape} does not match mask {mask.shape}")
    A, b = _difference_system(G, mask)
    m = A.shape[1]
    depth = np.zeros(mask.shape)
    if A.shape[0] == 0:
        return DepthMap(depth, mask)

    L = (A.T @ A).tocsr()
    rhs = A.T @ b
    if not np.any(rhs):
        return DepthMap(depth, mask)
    x, info = cg(L, rhs, rtol=CG_RTOL, maxiter=max(10 * m, 1000))
    residual = float(np.linalg.norm(L @ x - rhs) / np.linalg.norm(rhs))
    if info != 0:
        raise SolverError(f"conjugate gradient stagnated (relative residual {residual:.3e})",
                          stage="integrate_depth")
    logger.debug("integrated %d pixels, relative residual %.2e", m, residual)

    depth[mask] = x
    labels, count = ndimage.label(mask)
    for label in range(1, count + 1):
        part = labels == label
        depth[part] -= depth[part].mean()
    return DepthMap(depth, mask)


def depth_to_normals(dm: DepthMap) -> NormalMap:
    """Normals from depth by differences between masked neighbours (y up)"""
    D, mask = dm.depth, dm.mask
    h, w = mask.shape

    def slope(values, valid, axis, sign):
        fwd = np.zeros_like(values)
        bwd = np.zeros_like(values)
        has_f = np.zeros_like(valid)
        has_b = np.zeros_like(valid)
        if axis == 1:
            fwd[:, :-1] = values[:, 1:] - values[:, :-1]
            has_f[:, :-1] = valid[:, 1:] & valid[:, :-1]
            bwd[:, 1:] = values[:, 1:] - values[:, :-1]
            has_b[:, 1:] = valid[:, 1:] & valid[:, :-1]
        else:
            fwd[:-1, :] = values[1:, :] - values[:-1, :]
            has_f[:-1, :] = valid[1:, :] & valid[:-1, :]
            bwd[1:, :] = values[1:, :] - values[:-1, :]
            has_b[1:, :] = valid[1:, :] & valid[:-1, :]
        both = has_f & has_b
        out = np.where(both, 0.5 * (fwd + bwd), np.where(has_f, fwd, np.where(has_b, bwd, 0.0)))
        return sign * out

    p = slope(D, mask, axis=1, sign=1.0)
    # rows grow downward, y grows upward
    q = slope(D, mask, axis=0, sign=-1.0)
    vectors = np.stack([-p, -q, np.ones_like(D)], axis=-1)
    vectors[~mask] = 0.0
    return NormalMap.from_vectors(vectors, mask)


# === Facets ===

@dataclass
class FacetSet:
    """
    Surface discretized into k planar facets

    positions / normals / albedo / area are per facet. When built from a normal map
    the set also carries the block grid, a heightfield for visibility tests and the
    sparse resampling operators between pixels and facets.
    """
    positions: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    area: np.ndarray
    factor: int = 1
    mask: Optional[np.ndarray] = None
    grid: Optional[np.ndarray] = None
    heightfield: Optional[np.ndarray] = None
    downsample_matrix: Optional[sparse.csr_matrix] = field(default=None, repr=False)
    upsample_matrix: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        k = self.positions.shape[0]
        self.albedo = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (k,)).copy()
        self.area = np.broadcast_to(np.asarray(self.area, dtype=np.float64), (k,)).copy()
        if k == 0:
            raise GeometryError("empty facet set")
        if self.normals.shape[0] != k:
            raise GeometryError(f"{k} positions but {self.normals.shape[0]} normals")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
            raise GeometryError("facet normals must be unit length")
        if np.any(self.albedo < 0) or np.any(self.albedo >= 1.0):
            raise GeometryError("facet albedo must lie in [0, 1)")

    @property
    def k(self) -> int:
        return self.positions.shape[0]

    def downsample(self, values: np.ndarray) -> np.ndarray:
        """Masked block average of an h x w (x d) field -> k (x d)"""
        if self.downsample_matrix is None:
            raise GeometryError("facet set has no pixel grid")
        flat = values.reshape(self.downsample_matrix.shape[1], -1)
        out = self.downsample_matrix @ flat
        return out.reshape((self.k,) + values.shape[2:])

    def upsample(self, values: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of k (x d) facet values -> h x w (x d); zero off-mask"""
        if self.upsample_matrix is None:
            raise GeometryError("facet set has no pixel grid")
        flat = np.asarray(values).reshape(self.k, -1)
        out = self.upsample_matrix @ flat
        return out.reshape(self.mask.shape + np.asarray(values).shape[1:])


def _block_reduce(values: np.ndarray, weights: np.ndarray, factor: int, H: int, W: int):
    """Per-block weighted sums of an h x w (x d) field"""
    h, w = weights.shape
    pad = ((0, H * factor - h), (0, W * factor - w))
    wts = np.pad(weights, pad).reshape(H, factor, W, factor)
    if values.ndim == 2:
        vals = np.pad(values, pad).reshape(H, factor, W, factor)
        return (vals * wts).sum(axis=(1, 3))
    d = values.shape[2]
    vals = np.pad(values, pad + ((0, 0),)).reshape(H, factor, W, factor, d)
    return (vals * wts[..., None]).sum(axis=(1, 3))


def _resampling_operators(mask: np.ndarray, grid: np.ndarray, factor: int, k: int):
    h, w = mask.shape
    H, W = grid.shape
    rows, cols = np.nonzero(mask)
    pix = rows * w + cols

    # downsample: average over the masked pixels of each facet block
    facet_of_pixel = grid[rows // factor, cols // factor]
    keep = facet_of_pixel >= 0
    counts = np.bincount(facet_of_pixel[keep], minlength=k).astype(np.float64)
    down = sparse.csr_matrix(
        (1.0 / counts[facet_of_pixel[keep]], (facet_of_pixel[keep], pix[keep])),
        shape=(k, h * w),
    )

    # upsample: bilinear between block centres; empty blocks borrow the nearest facet
    empty = grid < 0
    if empty.any():
        _, (ni, nj) = ndimage.distance_transform_edt(empty, return_indices=True)
        filled = grid[ni, nj]
    else:
        filled = grid
    u = np.clip((rows - (factor - 1) / 2.0) / factor, 0.0, H - 1)
    v = np.clip((cols - (factor - 1) / 2.0) / factor, 0.0, W - 1)
    I0 = np.floor(u).astype(int)
    J0 = np.floor(v).astype(int)
    I1 = np.minimum(I0 + 1, H - 1)
    J1 = np.minimum(J0 + 1, W - 1)
    fu = u - I0
    fv = v - J0
    entries = [
        (filled[I0, J0], (1 - fu) * (1 - fv)),
        (filled[I0, J1], (1 - fu) * fv),
        (filled[I1, J0], fu * (1 - fv)),
        (filled[I1, J1], fu * fv),
    ]
    up_rows = np.concatenate([pix] * 4)
    up_cols = np.concatenate([e[0] for e in entries])
    up_vals = np.concatenate([e[1] for e in entries])
    up = sparse.csr_matrix((up_vals, (up_rows, up_cols)), shape=(h * w, k))
    return down, up


def build_facets(
    nm: NormalMap,
    albedo: AlbedoMap,
    mask: Optional[np.ndarray] = None,
    factor: int = 4,
    depth: Optional[DepthMap] = None,
) -> FacetSet:
    """Block-average a normal map into facets

    Args:
        nm: Full-resolution normals
        albedo: Full-resolution albedo (channel mean is used)
        mask: Object mask (defaults to the normal map's)
        factor: Block size in pixels
        depth: Depth to place facets at; integrated from nm when omitted

    Raises:
        GeometryError: no block is at least half covered by the mask
    """
    mask = nm.mask if mask is None else np.asarray(mask, dtype=bool) & nm.mask
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if depth is None:
        G, _ = normals_to_gradients(nm)
        depth = integrate_depth(G, mask)
    h, w = mask.shape
    H, W = -(-h // factor), -(-w // factor)

    weight = mask.astype(np.float64)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    count = _block_reduce(np.ones((h, w)), weight, factor, H, W)
    block_size = _block_reduce(np.ones((h, w)), np.ones((h, w)), factor, H, W)
    occupied = (count > 0) & (2 * count >= block_size)
    k = int(occupied.sum())
    if k == 0:
        raise GeometryError("no facets: mask covers no block at least half")

    grid = np.full((H, W), -1, dtype=np.int64)
    grid[occupied] = np.arange(k)

    denom = count[occupied]
    D = np.where(mask, depth.depth, 0.0)
    px = _block_reduce(cols, weight, factor, H, W)[occupied] / denom
    py = -_block_reduce(rows, weight, factor, H, W)[occupied] / denom
    pz = _block_reduce(D, weight, factor, H, W)[occupied] / denom
    n_sum = _block_reduce(nm.normals, weight, factor, H, W)[occupied]
    norms = np.linalg.norm(n_sum, axis=1)
    if np.any(norms == 0):
        raise GeometryError("facet normals cancel out inside a block")
    normals = n_sum / norms[:, None]
    rho = _block_reduce(albedo.gray(), weight, factor, H, W)[occupied] / denom
    rho = np.clip(rho, 0.0, 1.0 - 1e-6)

    flat_area = float(factor * factor)
    area = flat_area / np.maximum(normals[:, 2], 1.0 / AREA_CAP)

    heightfield = np.full((H, W), -np.inf)
    heightfield[occupied] = pz

    down, up = _resampling_operators(mask, grid, factor, k)
    logger.debug("built %d facets (factor %d) from %d pixels", k, factor, int(mask.sum()))
    return FacetSet(
        positions=np.stack([px, py, pz], axis=1),
        normals=normals,
        albedo=rho,
        area=area,
        factor=factor,
        mask=mask,
        grid=grid,
        heightfield=heightfield,
        downsample_matrix=down,
        upsample_matrix=up,
    )


# === Interreflection kernel ===

@dataclass(frozen=True)
class InterreflectionKernel:
    """k x k radiance-exchange matrix: nonnegative, symmetric, zero diagonal"""
    K: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise GeometryError(f"kernel must be square, got shape {K.shape}")
        object.__setattr__(self, "K", K)

    @property
    def k(self) -> int:
        return self.K.shape[0]


def _cell(points: np.ndarray, factor: int) -> tuple[np.ndarray, np.ndarray]:
    return np.floor(-points[:, 1] / factor).astype(int), np.floor(points[:, 0] / factor).astype(int)


def _occluded(fs: FacetSet, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """March each segment x_i -> x_j over the heightfield, one block per step"""
    hf = fs.heightfield
    H, W = hf.shape
    f = fs.factor
    tol = 1e-6 * f
    p0 = fs.positions[i]
    d = fs.positions[j] - p0
    steps = np.maximum(np.ceil(np.hypot(d[:, 0], d[:, 1]) / f).astype(int), 1)
    start = _cell(p0, f)
    end = _cell(fs.positions[j], f)
    blocked = np.zeros(len(i), dtype=bool)
    for s in range(1, int(steps.max())):
        active = (s < steps) & ~blocked
        if not active.any():
            break
        t = s / steps[active]
        pts = p0[active] + t[:, None] * d[active]
        I, J = _cell(pts, f)
        valid = (I >= 0) & (I < H) & (J >= 0) & (J < W)
        valid &= ~((I == start[0][active]) & (J == start[1][active]))
        valid &= ~((I == end[0][active]) & (J == end[1][active]))
        surface = np.full(len(pts), -np.inf)
        surface[valid] = hf[I[valid], J[valid]]
        idx = np.flatnonzero(active)
        blocked[idx] = surface > pts[:, 2] + tol
    return blocked


def interreflection_kernel(fs: FacetSet, occlusion: bool = True) -> InterreflectionKernel:
    """K_ij = (n_i . -r)(n_j . r) V / (r.r)^2 * sqrt(A_i A_j), r = x_i - x_j

    V is 1 when both cosines are strictly positive and, if the facet set carries a
    heightfield and `occlusion` is on, the segment between the facets is not below
    the surface.

    Raises:
        GeometryError: fewer than two facets or two facets at the same position
    """
    k = fs.k
    if k < 2:
        raise GeometryError("interreflection kernel needs at least 2 facets")
    K = np.zeros((k, k))
    iu, ju = np.triu_indices(k, 1)
    march = occlusion and fs.heightfield is not None

    for lo in range(0, len(iu), _PAIR_CHUNK):
        i = iu[lo:lo + _PAIR_CHUNK]
        j = ju[lo:lo + _PAIR_CHUNK]
        r = fs.positions[i] - fs.positions[j]
        rr = np.einsum("pk,pk->p", r, r)
        if np.any(rr == 0):
            p = int(np.flatnonzero(rr == 0)[0])
            raise GeometryError(f"coincident facets {int(i[p])} and {int(j[p])}")
        a = -np.einsum("pk,pk->p", fs.normals[i], r)
        b = np.einsum("pk,pk->p", fs.normals[j], r)
        visible = (a > 0) & (b > 0)
        if march and visible.any():
            cand = np.flatnonzero(visible)
            visible[cand] = ~_occluded(fs, i[cand], j[cand])
        value = np.where(visible, a * b / (rr * rr), 0.0) * np.sqrt(fs.area[i] * fs.area[j])
        K[i, j] = value
        K[j, i] = value

    logger.debug("kernel: %d facets, %d nonzero pairs", k, int(np.count_nonzero(K)) // 2)
    return InterreflectionKernel(K)
