"""
Interreflection solves and Nayar's iterative shape-from-interreflections
"""

import logging
import math
from typing import Callable, Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, eigs

from ..core import AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap, mean_angular_error
from ..errors import SolverError
from ..geometry import (
    FacetSet,
    InterreflectionKernel,
    build_facets,
    integrate_depth,
    interreflection_kernel,
    normals_to_gradients,
)
from .classic import scaled_normals, woodham_solve

logger = logging.getLogger(__name__)

DIRECT_SOLVE_MAX = 4096
NEUMANN_TOL = 1e-10
NEUMANN_MAX_ITER = 10_000
NAYAR_ITERS = 15
NAYAR_TOL_DEG = 0.01


def _diag(P) -> np.ndarray:
    """P as its diagonal vector (accepts a vector or a square diagonal matrix)"""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim == 2:
        return np.diag(P).copy()
    return P.reshape(-1)


def _kernel(K) -> np.ndarray:
    return K.K if isinstance(K, InterreflectionKernel) else np.asarray(K, dtype=np.float64)


def _coupling(P, K) -> np.ndarray:
    p = _diag(P)
    K = _kernel(K)
    if K.shape != (p.size, p.size):
        raise ValueError(f"P has {p.size} entries but K is {K.shape}")
    return p[:, None] * K


def spectral_radius(P, K) -> float:
    """Spectral radius of PK"""
    PK = _coupling(P, K)
    m = PK.shape[0]
    if m <= 512:
        return float(np.max(np.abs(np.linalg.eigvals(PK)))) if m else 0.0
    try:
        vals = eigs(PK, k=1, which="LM", return_eigenvectors=False)
    except ArpackNoConvergence as e:
        if len(e.eigenvalues) == 0:
            raise SolverError("spectral radius estimate did not converge", stage="interreflection")
        vals = e.eigenvalues
    return float(np.max(np.abs(vals)))


def _check_physical(PK: np.ndarray, P, K) -> None:
    # row-sum norm bounds the spectral radius of a nonnegative matrix
    if np.all(PK >= 0) and np.abs(PK).sum(axis=1).max(initial=0.0) < 1.0:
        return
    radius = spectral_radius(P, K)
    if radius >= 1.0:
        raise SolverError(f"non-physical albedo/kernel (spectral radius {radius:.4f} >= 1)",
                          stage="interreflection")


def forward_interreflect(Xs: np.ndarray, P, K) -> np.ndarray:
    """Radiance including interreflections: solve (I - PK) X = Xs

    Args:
        Xs: m x n source-only radiance (or m x 3 facet matrix)
        P: m diagonal entries rho / pi (vector or diagonal matrix)
        K: m x m kernel

    Raises:
        SolverError: spectral radius of PK >= 1
    """
    PK = _coupling(P, K)
    Xs = np.asarray(Xs, dtype=np.float64)
    _check_physical(PK, P, K)
    m = PK.shape[0]
    if m <= DIRECT_SOLVE_MAX:
        return scipy.linalg.solve(np.eye(m) - PK, Xs)

    X = Xs.copy()
    for it in range(NEUMANN_MAX_ITER):
        X_new = Xs + PK @ X
        change = np.linalg.norm(X_new - X) / max(np.linalg.norm(X_new), 1e-300)
        X = X_new
        if change < NEUMANN_TOL:
            logger.debug("Neumann series converged in %d iterations", it + 1)
            return X
    raise SolverError(f"Neumann iteration did not converge (relative change {change:.2e})",
                      stage="interreflection")


def nayar_update(F: np.ndarray, P, K) -> np.ndarray:
    """(I - PK)^-1 F: facet matrix with interreflections folded in"""
    return forward_interreflect(F, P, K)


def nayar_correct(F_pseudo: np.ndarray, P, K) -> np.ndarray:
    """(I - PK) F: remove interreflections from a pseudo facet matrix"""
    PK = _coupling(P, K)
    F_pseudo = np.asarray(F_pseudo, dtype=np.float64)
    return F_pseudo - PK @ F_pseudo


class InterreflectionOperator:
    """
    Prefactorized (I - PK) for repeated solves with the same kernel

    Used between kernel refreshes of the inverse-rendering network, where both the
    forward map and its adjoint are needed every iteration.
    """

    def __init__(self, P, K):
        PK = _coupling(P, K)
        _check_physical(PK, P, K)
        self.m = PK.shape[0]
        self._lu = scipy.linalg.lu_factor(np.eye(self.m) - PK)

    def solve(self, F: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, F)

    def solve_adjoint(self, G: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, G, trans=1)

    @classmethod
    def identity(cls, m: int) -> "InterreflectionOperator":
        return cls(np.zeros(m), np.zeros((m, m)))


# === Nayar iteration ===

def _facet_coupling(fs: FacetSet) -> tuple[np.ndarray, np.ndarray]:
    K = interreflection_kernel(fs).K
    return fs.albedo / math.pi, K


def nayar_iterate(
    stack: ImageStack,
    lights: LightSet,
    iters: int = NAYAR_ITERS,
    factor: int = 4,
    tol_deg: float = NAYAR_TOL_DEG,
    on_round: Optional[Callable[[int, float], None]] = None,
) -> tuple[NormalMap, AlbedoMap, DepthMap]:
    """Refine pseudo normals by alternating kernel estimation and correction

    Each round builds facets from the current estimate, estimates K and P, recovers
    the true facet matrix from the fixed pseudo one with (I - PK) F, and upsamples
    the result with the pseudo normals' fine detail reattached.

    Args:
        stack: Calibrated image stack
        lights: Light set matching the stack
        iters: Maximum number of rounds
        factor: Facet block size
        tol_deg: Stop when successive estimates differ by less than this MAE
        on_round: Called with (round, MAE change) after each round
    """
    mask = stack.mask
    B = scaled_normals(stack, lights)
    N0, A0 = woodham_solve(stack, lights)
    # pseudo facet matrix keeps the unclamped albedo
    F_pseudo = np.zeros(mask.shape + (3,))
    F_pseudo[mask] = B.mean(axis=2)
    rho_pseudo = np.zeros(mask.shape + (stack.c,))
    rho_pseudo[mask] = np.linalg.norm(B, axis=1)

    normals, albedo = N0, A0
    for t in range(iters):
        fs = build_facets(normals, albedo, mask, factor=factor)
        P, K = _facet_coupling(fs)
        F_ps = fs.downsample(F_pseudo)
        F_true = nayar_correct(F_ps, P, K)

        norms = np.linalg.norm(F_true, axis=1)
        ps_norms = np.linalg.norm(F_ps, axis=1)
        bad = norms <= 0
        if bad.any():
            logger.warning("round %d: %d facets lost all signal; keeping pseudo normals", t + 1, int(bad.sum()))
            F_true[bad] = F_ps[bad]
            norms[bad] = ps_norms[bad]
        n_facet = F_true / norms[:, None]

        detail = N0.normals - fs.upsample(fs.downsample(N0.normals))
        vectors = fs.upsample(n_facet) + detail
        vectors[~mask] = 0.0
        new_normals = NormalMap.from_vectors(vectors, mask)

        ratio = np.where(ps_norms > 0, norms / np.maximum(ps_norms, 1e-300), 1.0)
        scale = fs.upsample(ratio)
        new_albedo = AlbedoMap.clamped(rho_pseudo * scale[..., None], mask)

        delta = mean_angular_error(new_normals, normals)
        normals, albedo = new_normals, new_albedo
        logger.info("nayar round %d: %d facets, MAE change %.4f deg", t + 1, fs.k, delta)
        if on_round is not None:
            on_round(t + 1, delta)
        if delta < tol_deg:
            break

    G, _ = normals_to_gradients(normals)
    depth = integrate_depth(G, mask)
    return normals, albedo, depth
