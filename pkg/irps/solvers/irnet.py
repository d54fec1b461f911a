"""
Inverse-rendering network fitted per scene at test time

The network maps the normalized image stack to normals (estimation branch
xi_f -> xi_n1), pushes them through the interreflection model (xi_n2) and
re-renders every input image from a learned per-image reflectance map
(f_sp -> f_lg -> f_r). Parameters are optimized with Adam against the
reconstruction loss, pulled toward an initial normal map for the first
iterations.

Tensors are laid out (b, c, h, w); the n images of a stack form the batch of
the per-image branches.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Generator, NamedTuple, Optional

import numpy as np

from ..autodiff import (
    Adam,
    Tape,
    Tensor,
    add,
    broadcast_batch,
    channel_norm,
    concat_channels,
    conv2d_1x1,
    conv2d_3x3,
    hadamard,
    l2_normalize_channels,
    light_shading,
    linear_operator,
    lrelu,
    masked_mean_abs,
    masked_mean_sqnorm,
    relu,
    scalar_mul,
    specular_guide,
    sub,
)
from ..core import VIEW, AlbedoMap, DepthMap, ImageStack, LightSet, NormalMap, mean_angular_error
from ..errors import GeometryError, SolverError
from ..geometry import FacetSet, build_facets, integrate_depth, interreflection_kernel, normals_to_gradients
from .interreflection import InterreflectionOperator

logger = logging.getLogger(__name__)

_RHO_FLOOR = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """Optimization schedule and network shape for one test-time fit"""
    iterations: int = 1000
    lr: float = 8e-4
    estimation_lr: Optional[float] = None
    lr_drop_at: int = 900
    lr_drop: float = 0.1
    weak_cutoff: int = 50
    weak_supervision: bool = True
    interreflection: bool = True
    sample_fraction: float = 0.1
    kernel_refresh: int = 100
    noise_variance: float = 0.1
    seed: int = 0
    factor: int = 4
    crop_padding: int = 4
    init_std: float = 0.02
    init_mode: str = "std"
    activation: str = "relu"
    lrelu_slope: float = 0.1
    norm_eps: float = 1e-5
    feature_widths: tuple[int, ...] = (32, 32, 32)
    specular_widths: tuple[int, ...] = (16, 16, 16)
    global_width: int = 32
    reflectance_width: int = 32

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("lr", "lr_drop", "init_std", "norm_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.estimation_lr is not None and not self.estimation_lr > 0:
            raise ValueError(f"estimation_lr must be positive, got {self.estimation_lr}")
        if self.lr_drop_at < 1 or self.weak_cutoff < 0 or self.kernel_refresh < 1:
            raise ValueError("lr_drop_at and kernel_refresh must be >= 1, weak_cutoff >= 0")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        if self.crop_padding < 0:
            raise ValueError(f"crop_padding must be >= 0, got {self.crop_padding}")
        if self.init_mode not in ("std", "variance"):
            raise ValueError(f"init_mode must be std or variance, got {self.init_mode!r}")
        if self.activation not in ("relu", "lrelu"):
            raise ValueError(f"activation must be relu or lrelu, got {self.activation!r}")
        widths = self.feature_widths + self.specular_widths + (self.global_width, self.reflectance_width)
        if not self.feature_widths or not self.specular_widths or min(widths) < 1:
            raise ValueError("channel widths must be positive and non-empty")

    @property
    def weight_std(self) -> float:
        return self.init_std if self.init_mode == "std" else math.sqrt(self.init_std)


@dataclass(frozen=True)
class LossRecord:
    """One optimization step; rec/weak are unweighted, lambda_w is the applied weight"""
    iteration: int
    rec: float
    weak: float
    lambda_w: float
    lr: float
    mae: Optional[float] = None


@dataclass(frozen=True)
class FitEvent:
    """Schedule change during a fit (kernel_refresh, lr_drop)"""
    iteration: int
    kind: str
    detail: str = ""


@dataclass
class FitResult:
    normals_o: NormalMap
    normals_ny: NormalMap
    depth: DepthMap
    reflectance: np.ndarray
    trace: list[LossRecord] = field(default_factory=list)
    events: list[FitEvent] = field(default_factory=list)
    lambda_w: float = 0.0
    scale: float = 1.0

    @property
    def iterations(self) -> int:
        return len(self.trace)


# === Inputs and parameters ===

@dataclass(frozen=True)
class FitInputs:
    """Normalized image stack X' = X / (2 sigma_q) in (n, c, h, w) layout"""
    images: np.ndarray
    mask: np.ndarray
    lights: np.ndarray
    directions: np.ndarray
    scale: float

    @classmethod
    def from_stack(cls, stack: ImageStack, lights: LightSet) -> "FitInputs":
        if lights.n != stack.n:
            raise ValueError(f"{lights.n} lights for {stack.n} images")
        sigma_q = float(np.sqrt(np.mean(stack.images[:, stack.mask, :] ** 2)))
        if sigma_q == 0.0:
            raise SolverError("images carry no signal inside the mask", stage="irnet")
        scale = 2.0 * sigma_q
        images = stack.images.transpose(0, 3, 1, 2) / scale
        images = images * stack.mask[None, None]
        return cls(images, stack.mask, lights.scaled(), lights.directions, scale)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def c(self) -> int:
        return self.images.shape[1]

    def features_input(self) -> Tensor:
        """All images stacked along channels plus the mask: (1, n*c + 1, h, w)"""
        n, c, h, w = self.images.shape
        stacked = self.images.reshape(1, n * c, h, w)
        return Tensor(np.concatenate([stacked, self.mask[None, None].astype(np.float64)], axis=1))


def _conv_layer(tensors, rng, name, c_in, c_out, std, size=3, norm=True):
    shape = (c_out, c_in, 3, 3) if size == 3 else (c_out, c_in)
    tensors[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=f"{name}.w")
    tensors[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")
    if norm:
        tensors[f"{name}.gamma"] = Tensor(np.ones(c_out), requires_grad=True, name=f"{name}.gamma")
        tensors[f"{name}.beta"] = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.beta")


@dataclass
class NetParams:
    """Named parameter tensors of every branch"""
    tensors: dict[str, Tensor]

    ESTIMATION = ("xi_f.", "xi_n1.")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def estimation(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if k.startswith(self.ESTIMATION)]

    def rendering(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if not k.startswith(self.ESTIMATION)]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    @classmethod
    def initialize(cls, n: int, c: int, cfg: FitConfig, rng: np.random.Generator) -> "NetParams":
        """Zero-mean Gaussian weights, zero biases, identity affine"""
        std = cfg.weight_std
        t: dict[str, Tensor] = {}

        c_in = n * c + 1
        for i, width in enumerate(cfg.feature_widths):
            _conv_layer(t, rng, f"xi_f.{i}", c_in, width, std)
            c_in = width
        phi = c_in
        _conv_layer(t, rng, "xi_n1", phi, 3, std, norm=False)

        c_in = c + 1
        for i, width in enumerate(cfg.specular_widths):
            _conv_layer(t, rng, f"f_sp.{i}", c_in, width, std)
            c_in = width
        _conv_layer(t, rng, "f_lg", c_in + phi, cfg.global_width, std, size=1)
        _conv_layer(t, rng, "f_r.0", cfg.global_width, cfg.reflectance_width, std)
        _conv_layer(t, rng, "f_r.1", cfg.reflectance_width, c, std, norm=False)
        return cls(t)


# === xi_n2: interreflection transfer on normals ===

class FacetTransfer:
    """
    N -> U diag(1/rho) (I - PK)^-1 diag(rho) D N + (N - U D N) on (1, 3, h, w) tensors

    D averages pixels into facets, U interpolates back; the second term keeps the
    detail finer than a facet. K and P stay fixed between kernel refreshes, so
    the map is linear with the explicit adjoint below.
    """

    def __init__(self, facets: FacetSet, operator: InterreflectionOperator):
        if operator.m != facets.k:
            raise GeometryError(f"operator over {operator.m} facets for {facets.k} facets")
        self.facets = facets
        self.operator = operator
        self.D = facets.downsample_matrix
        self.U = facets.upsample_matrix
        self.rho = np.maximum(facets.albedo, _RHO_FLOOR)[:, None]

    @property
    def k(self) -> int:
        return self.facets.k

    def forward(self, x: np.ndarray) -> np.ndarray:
        flat = x[0].reshape(3, -1).T
        coarse = self.D @ flat
        lit = self.operator.solve(self.rho * coarse) / self.rho
        out = flat + self.U @ (lit - coarse)
        return out.T.reshape(x.shape)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        flat = g[0].reshape(3, -1).T
        up = self.U.T @ flat
        back = self.rho * self.operator.solve_adjoint(up / self.rho)
        out = flat + self.D.T @ (back - up)
        return out.T.reshape(g.shape)

    def __call__(self, normals: Tensor) -> Tensor:
        return linear_operator(normals, self.forward, self.adjoint, name="xi_n2")


def build_transfer(normals: NormalMap, albedo: AlbedoMap, mask: np.ndarray, factor: int = 4) -> FacetTransfer:
    """Facetize a normal estimate and prefactorize its interreflection solve"""
    fs = build_facets(normals, albedo, mask, factor=factor)
    K = interreflection_kernel(fs).K
    return FacetTransfer(fs, InterreflectionOperator(fs.albedo / math.pi, K))


# === Forward pass ===

class NetOutputs(NamedTuple):
    features: Tensor
    normals_o: Tensor
    normals_ny: Tensor
    reflectance: Tensor
    rendered: Tensor


def _finite(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise SolverError(f"non-finite activation in {name}", stage="irnet")
    return t


def _act(x: Tensor, cfg: FitConfig) -> Tensor:
    return relu(x) if cfg.activation == "relu" else lrelu(x, cfg.lrelu_slope)


def _block(x: Tensor, params: NetParams, name: str, cfg: FitConfig) -> Tensor:
    y = conv2d_3x3(x, params[f"{name}.w"], params[f"{name}.b"])
    y = channel_norm(y, params[f"{name}.gamma"], params[f"{name}.beta"], cfg.norm_eps)
    return _finite(name, _act(y, cfg))


def specular_map(nm: NormalMap, l: np.ndarray, v: np.ndarray = VIEW) -> np.ndarray:
    """R = v . (2 (n . l) n - l) per pixel; zero outside the mask"""
    l = np.asarray(l, dtype=np.float64)
    n = nm.normals
    nl = n @ l
    r = 2.0 * nl[..., None] * n - l
    R = r @ np.asarray(v, dtype=np.float64)
    return np.where(nm.mask, R, 0.0)


def forward_pass(
    inputs: FitInputs,
    params: NetParams,
    cfg: FitConfig = FitConfig(),
    transfer: Optional[FacetTransfer] = None,
    noise: Optional[np.ndarray] = None,
) -> NetOutputs:
    """Render every input image from the current parameters

    Args:
        inputs: Normalized stack and lights
        params: Network parameters
        cfg: Activation and normalization settings
        transfer: Interreflection map for xi_n2 (identity when None)
        noise: Added to the copy of the images fed to f_sp only
    """
    n = inputs.n
    mask = inputs.mask

    phi = inputs.features_input()
    for i in range(len(cfg.feature_widths)):
        phi = _block(phi, params, f"xi_f.{i}", cfg)

    raw = conv2d_3x3(phi, params["xi_n1.w"], params["xi_n1.b"])
    normals_o = _finite("xi_n1", l2_normalize_channels(raw))
    normals_ny = normals_o
    if transfer is not None:
        normals_ny = _finite("xi_n2", l2_normalize_channels(transfer(normals_o)))

    R = specular_guide(normals_ny, inputs.directions, mask)
    observed = inputs.images if noise is None else inputs.images + noise
    s = concat_channels([Tensor(observed), R])
    for i in range(len(cfg.specular_widths)):
        s = _block(s, params, f"f_sp.{i}", cfg)

    z = conv2d_1x1(concat_channels([s, broadcast_batch(phi, n)]), params["f_lg.w"], params["f_lg.b"])
    z = _finite("f_lg", _act(channel_norm(z, params["f_lg.gamma"], params["f_lg.beta"], cfg.norm_eps), cfg))

    psi = _block(z, params, "f_r.0", cfg)
    psi = _finite("f_r.1", relu(conv2d_3x3(psi, params["f_r.1.w"], params["f_r.1.b"])))

    shading = relu(light_shading(normals_ny, inputs.lights))
    rendered = hadamard(psi, shading)
    return NetOutputs(phi, normals_o, normals_ny, psi, rendered)


# === Losses ===

def sample_mask(mask: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """0/1 map selecting a random subset of the masked pixels"""
    rows, cols = np.nonzero(mask)
    count = max(1, int(round(fraction * rows.size)))
    out = np.zeros(mask.shape)
    if count >= rows.size:
        out[rows, cols] = 1.0
        return out
    pick = rng.choice(rows.size, size=count, replace=False)
    out[rows[pick], cols[pick]] = 1.0
    return out


def rec_loss(X, X_tilde, mask: np.ndarray, sample_fraction: float = 1.0, seed=0) -> Tensor:
    """Mean |X - X~| over sampled masked pixels, all images and channels

    Args:
        X: Target images (n, c, h, w)
        X_tilde: Rendered images (n, c, h, w)
        mask: Object mask
        sample_fraction: Fraction of masked pixels drawn
        seed: Seed or Generator for the draw
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W = sample_mask(np.asarray(mask, dtype=bool), sample_fraction, rng)
    return masked_mean_abs(sub(X_tilde, X), W[None, None])


def _normal_tensor(x) -> Tensor:
    if isinstance(x, NormalMap):
        return Tensor(x.normals.transpose(2, 0, 1)[None])
    return x if isinstance(x, Tensor) else Tensor(x)


def weak_loss(normals_ny, normals_init, mask: np.ndarray) -> Tensor:
    """Mean squared distance between two normal fields over the mask"""
    diff = sub(_normal_tensor(normals_ny), _normal_tensor(normals_init))
    return masked_mean_sqnorm(diff, np.asarray(mask, dtype=bool))


def objective(
    inputs: FitInputs,
    params: NetParams,
    cfg: FitConfig,
    transfer: Optional[FacetTransfer],
    normals_init: Tensor,
    sample: np.ndarray,
    weight: float,
    noise: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor, Tensor, NetOutputs]:
    """L_rec + weight * L_weak; returns (loss, L_rec, L_weak, outputs)"""
    out = forward_pass(inputs, params, cfg, transfer, noise)
    l_rec = masked_mean_abs(sub(out.rendered, inputs.images), sample[None, None])
    l_weak = weak_loss(out.normals_ny, normals_init, inputs.mask)
    loss = add(l_rec, scalar_mul(l_weak, weight)) if weight > 0 else l_rec
    return loss, l_rec, l_weak, out


def _normal_map(t: Tensor, mask: np.ndarray, fallback: NormalMap) -> NormalMap:
    """Network normals as a NormalMap; dead or back-facing pixels take the fallback normal"""
    vectors = t.data[0].transpose(1, 2, 0) * mask[..., None]
    vectors[..., 2] = np.maximum(vectors[..., 2], 0.0)
    dead = mask & ~(np.linalg.norm(vectors, axis=-1) > 0)
    if dead.any():
        logger.debug("%d masked pixels without a normal take the fallback", int(dead.sum()))
        vectors[dead] = fallback.normals[dead]
    return NormalMap.from_vectors(vectors, mask)


# === Crop to the object ===

def crop_window(mask: np.ndarray, padding: int) -> tuple[slice, slice]:
    """Bounding box of the mask grown by `padding` pixels, clipped to the frame"""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return slice(0, mask.shape[0]), slice(0, mask.shape[1])
    h, w = mask.shape
    return (
        slice(max(rows.min() - padding, 0), min(rows.max() + padding + 1, h)),
        slice(max(cols.min() - padding, 0), min(cols.max() + padding + 1, w)),
    )


def _crop_normals(nm: Optional[NormalMap], window) -> Optional[NormalMap]:
    if nm is None:
        return None
    return NormalMap(nm.normals[window], nm.mask[window])


def _uncrop(values: np.ndarray, window, frame: tuple[int, int], axis: int = 0) -> np.ndarray:
    """Zero-fill a cropped array back to the full frame; image axes start at `axis`"""
    shape = list(values.shape)
    shape[axis:axis + 2] = frame
    out = np.zeros(shape)
    out[(slice(None),) * axis + window] = values
    return out


# === Test-time fit ===

def fit_iter(
    stack: ImageStack,
    lights: LightSet,
    normals_init: NormalMap,
    albedo_init: AlbedoMap,
    cfg: FitConfig = FitConfig(),
    normals_gt: Optional[NormalMap] = None,
) -> Generator[LossRecord | FitEvent, None, FitResult]:
    """Optimize the network on one stack, yielding every LossRecord and FitEvent

    The network runs on the mask's bounding box grown by cfg.crop_padding;
    returned maps cover the full frame. Returns the FitResult as the
    generator's return value.

    Raises:
        SolverError: initial normals do not cover the mask, or the loss turns non-finite
    """
    if normals_init.shape != stack.mask.shape or not normals_init.mask[stack.mask].all():
        raise SolverError("initial normals do not cover the object mask", stage="irnet")
    frame = stack.mask.shape
    window = crop_window(stack.mask, cfg.crop_padding)
    stack = ImageStack(stack.images[(slice(None),) + window], stack.mask[window])
    normals_init = _crop_normals(normals_init, window)
    albedo_init = AlbedoMap(albedo_init.albedo[window], albedo_init.mask[window])
    normals_gt = _crop_normals(normals_gt, window)
    logger.debug("fitting on a %dx%d crop of the %dx%d frame", stack.h, stack.w, *frame)

    mask = stack.mask
    inputs = FitInputs.from_stack(stack, lights)
    rng = np.random.default_rng(cfg.seed)
    params = NetParams.initialize(stack.n, stack.c, cfg, rng)
    optim = Adam({
        "estimation": (params.estimation(), cfg.estimation_lr or cfg.lr),
        "rendering": (params.rendering(), cfg.lr),
    })
    init = _normal_tensor(normals_init)
    lambda_w = rec_loss(inputs.images, np.zeros_like(inputs.images), mask).item()
    noise_std = math.sqrt(cfg.noise_variance)

    trace: list[LossRecord] = []
    events: list[FitEvent] = []

    def note(event: FitEvent) -> FitEvent:
        events.append(event)
        logger.info("iteration %d: %s %s", event.iteration, event.kind, event.detail)
        return event

    transfer: Optional[FacetTransfer] = None
    if cfg.interreflection:
        try:
            transfer = build_transfer(normals_init, albedo_init, mask, cfg.factor)
        except GeometryError as e:
            raise SolverError(f"initial facetization failed: {e}", stage="irnet")
        yield note(FitEvent(0, "kernel_refresh", f"{transfer.k} facets from initial normals"))

    latest_o: Optional[Tensor] = None
    for it in range(cfg.iterations):
        if transfer is not None and it > 0 and it % cfg.kernel_refresh == 0 and latest_o is not None:
            transfer = build_transfer(_normal_map(latest_o, mask, normals_init), albedo_init, mask, cfg.factor)
            yield note(FitEvent(it + 1, "kernel_refresh", f"{transfer.k} facets"))
        if it == cfg.lr_drop_at:
            optim.scale = cfg.lr_drop
            yield note(FitEvent(it + 1, "lr_drop", f"lr {optim.lr('rendering'):.2e}"))

        noise = rng.normal(0.0, noise_std, size=inputs.images.shape) if noise_std > 0 else None
        sample = sample_mask(mask, cfg.sample_fraction, rng)
        weight = lambda_w if cfg.weak_supervision and it < cfg.weak_cutoff else 0.0

        optim.zero_grad()
        with Tape() as tape:
            loss, l_rec, l_weak, out = objective(inputs, params, cfg, transfer, init, sample, weight, noise)
        if not np.isfinite(loss.item()):
            raise SolverError(f"non-finite loss at iteration {it + 1}", stage="irnet")
        tape.backward(loss)
        optim.step()
        latest_o = out.normals_o

        mae = None
        if normals_gt is not None:
            mae = mean_angular_error(_normal_map(out.normals_ny, mask, normals_init), normals_gt, mask)
        record = LossRecord(it + 1, l_rec.item(), l_weak.item(), weight, optim.lr("rendering"), mae)
        trace.append(record)
        yield record

    final = forward_pass(inputs, params, cfg, transfer)
    full_mask = _uncrop(mask, window, frame).astype(bool)
    normals_o = _normal_map(final.normals_o, mask, normals_init)
    normals_ny = _normal_map(final.normals_ny, mask, normals_init)
    G, clamped = normals_to_gradients(normals_ny)
    if clamped:
        logger.debug("%d grazing normals clamped before integration", clamped)
    depth = integrate_depth(G, mask)
    reflectance = final.reflectance.data.transpose(0, 2, 3, 1) * inputs.scale
    return FitResult(
        normals_o=NormalMap(_uncrop(normals_o.normals, window, frame), full_mask),
        normals_ny=NormalMap(_uncrop(normals_ny.normals, window, frame), full_mask),
        depth=DepthMap(_uncrop(np.where(mask, depth.depth, 0.0), window, frame), full_mask),
        reflectance=_uncrop(reflectance, window, frame, axis=1),
        trace=trace,
        events=events,
        lambda_w=lambda_w,
        scale=inputs.scale,
    )


def fit(
    stack: ImageStack,
    lights: LightSet,
    normals_init: NormalMap,
    albedo_init: AlbedoMap,
    cfg: FitConfig = FitConfig(),
    normals_gt: Optional[NormalMap] = None,
) -> FitResult:
    """Run fit_iter to completion"""
    gen = fit_iter(stack, lights, normals_init, albedo_init, cfg, normals_gt)
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value
