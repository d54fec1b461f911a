"""
Robust normal initialization

Low-rank + sparse decomposition X = Z + E where only the singular values beyond
the K-th are penalized (partial sum of singular values), solved with inexact ALM.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from ..core import AlbedoMap, ImageStack, LightSet, NormalMap
from ..errors import DegenerateLightsError, SolverError

logger = logging.getLogger(__name__)

RANK = 3
MU_SCALE = 1.25
RHO_MU = 1.5
TOL = 1e-7
MAX_ITER = 200
MU_MAX_FACTOR = 1e7


@dataclass
class RpcaResult:
    """Low-rank part Z, sparse part E and convergence info"""
    Z: np.ndarray
    E: np.ndarray
    iterations: int
    residual: float
    converged: bool


def soft_threshold(x, tau: float):
    """sign(x) max(|x| - tau, 0), elementwise"""
    if tau < 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def _svd(M: np.ndarray):
    try:
        return scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
    except np.linalg.LinAlgError as e:
        raise SolverError(f"SVD did not converge: {e}", stage="partial_svt")


def partial_svt(M: np.ndarray, K: int, tau: float) -> np.ndarray:
    """Keep the top-K singular values, soft-threshold the rest by tau

    Tall matrices (m > 2n) go through the eigendecomposition of the n x n Gram
    matrix, which rescales the right singular subspace without forming U.
    """
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    if tau < 0:
        raise ValueError(f"threshold must be >= 0, got {tau}")
    M = np.asarray(M, dtype=np.float64)
    m, n = M.shape

    if m > 2 * n:
        try:
            w, V = scipy.linalg.eigh(M.T @ M)
        except np.linalg.LinAlgError as e:
            raise SolverError(f"eigendecomposition did not converge: {e}", stage="partial_svt")
        order = np.argsort(w)[::-1]
        w, V = w[order], V[:, order]
        sigma = np.sqrt(np.clip(w, 0.0, None))
        ratio = np.ones(n)
        tail = np.arange(n) >= K
        shrunk = np.maximum(sigma - tau, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio[tail] = np.where(sigma[tail] > 0, shrunk[tail] / sigma[tail], 0.0)
        return M @ ((V * ratio) @ V.T)

    U, s, Vt = _svd(M)
    s = s.copy()
    s[K:] = np.maximum(s[K:] - tau, 0.0)
    return (U * s) @ Vt


def rpca_partial_sum(
    X: np.ndarray,
    K: int = RANK,
    lam: Optional[float] = None,
    mu: Optional[float] = None,
    rho_mu: float = RHO_MU,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    mu_max: Optional[float] = None,
) -> RpcaResult:
    """
    min sum_{i>K} sigma_i(Z) + lam ||E||_1  s.t.  X = Z + E

    Args:
        X: m x n data (pixels x images)
        K: Number of unpenalized singular values
        lam: Sparsity weight (default 1 / sqrt(max(m, n)))
        mu: Initial penalty (default 1.25 / sigma_1(X))
        rho_mu: Penalty growth per iteration
        tol: Stop when ||X - Z - E||_F / ||X||_F < tol
        max_iter: Iteration cap
        mu_max: Penalty ceiling (default 1e7 * mu)

    Returns:
        RpcaResult; `converged` is False when max_iter was reached
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be a matrix, got shape {X.shape}")
    m, n = X.shape
    if m < K or n < K:
        raise ValueError(f"X is {m}x{n}, needs at least {K} rows and columns")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")

    norm_X = float(np.linalg.norm(X))
    if norm_X == 0:
        return RpcaResult(np.zeros_like(X), np.zeros_like(X), 0, 0.0, True)

    sigma1 = float(_svd(X)[1][0])
    lam = 1.0 / np.sqrt(max(m, n)) if lam is None else lam
    mu = MU_SCALE / sigma1 if mu is None else mu
    mu_max = MU_MAX_FACTOR * mu if mu_max is None else mu_max

    Y = X / max(sigma1, float(np.abs(X).max()) / lam)
    E = np.zeros_like(X)
    Z = X
    residual = np.inf
    for it in range(1, max_iter + 1):
        Z = partial_svt(X - E + Y / mu, K, 1.0 / mu)
        E = soft_threshold(X - Z + Y / mu, lam / mu)
        R = X - Z - E
        Y = Y + mu * R
        mu = min(rho_mu * mu, mu_max)
        residual = float(np.linalg.norm(R)) / norm_X
        if residual < tol:
            logger.debug("rpca converged in %d iterations (residual %.2e)", it, residual)
            return RpcaResult(Z, E, it, residual, True)

    logger.warning("rpca stopped after %d iterations with residual %.2e", max_iter, residual)
    return RpcaResult(Z, E, max_iter, residual, False)


def lowrank_scaled_normals(Z: np.ndarray, lights: LightSet) -> np.ndarray:
    """Least-squares albedo-scaled normals N = (L L^T)^-1 L Z^T (3 x m)

    Z is expected in intensity-normalized units, so L holds the unit directions.
    """
    L = lights.directions.T
    if np.linalg.matrix_rank(L) < 3:
        raise DegenerateLightsError("degenerate light configuration")
    if Z.shape[1] != lights.n:
        raise ValueError(f"Z has {Z.shape[1]} columns for {lights.n} lights")
    return np.linalg.solve(L @ L.T, L @ Z.T)


def normals_from_lowrank(Z: np.ndarray, lights: LightSet, mask: np.ndarray) -> tuple[NormalMap, AlbedoMap]:
    """Unit normals and albedo from a low-rank intensity matrix over the masked pixels"""
    mask = np.asarray(mask, dtype=bool)
    N = lowrank_scaled_normals(np.asarray(Z, dtype=np.float64), lights)
    if N.shape[1] != int(mask.sum()):
        raise ValueError(f"Z has {N.shape[1]} rows for {int(mask.sum())} masked pixels")
    vectors = np.zeros(mask.shape + (3,))
    vectors[mask] = N.T
    albedo = np.zeros(mask.shape)
    albedo[mask] = np.linalg.norm(N, axis=0)
    return NormalMap.from_vectors(vectors, mask), AlbedoMap.clamped(albedo, mask)


def robust_initialize(
    stack: ImageStack,
    lights: LightSet,
    **rpca_kw,
) -> tuple[NormalMap, AlbedoMap, RpcaResult]:
    """Normals and albedo from the low-rank part of the intensity-normalized stack"""
    if lights.n != stack.n:
        raise ValueError(f"{lights.n} lights for {stack.n} images")
    X = stack.gray() / lights.intensities[None, :]
    result = rpca_partial_sum(X, **rpca_kw)
    if not result.converged:
        logger.warning("robust initialization did not converge; using the last iterate")
    normals, gray = normals_from_lowrank(result.Z, lights, stack.mask)

    # per-channel albedo follows each channel's share of the summed radiance
    totals = stack.images[:, stack.mask, :].sum(axis=0)          # m x c
    mean = totals.mean(axis=1, keepdims=True)
    ratio = np.where(mean > 0, totals / np.where(mean > 0, mean, 1.0), 1.0)
    albedo = np.zeros(stack.mask.shape + (stack.c,))
    albedo[stack.mask] = gray.albedo[stack.mask] * ratio
    outliers = float(np.mean(np.abs(result.E) > 1e-6))
    logger.info("robust init: %d iterations, residual %.2e, %.1f%% entries flagged sparse",
                result.iterations, result.residual, 100 * outliers)
    return normals, AlbedoMap.clamped(albedo, stack.mask), result
