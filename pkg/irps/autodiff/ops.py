"""
Differentiable primitives

Image tensors are (b, c, h, w): a batch of b images with c channels each.
Every primitive computes its forward value with numpy and records an exact
vector-Jacobian product on the active tape.
"""

from typing import Callable, Sequence

import numpy as np

from ..errors import AutodiffError
from .tape import Tensor, as_tensor, record


def _check(op: str, cond: bool, detail: str) -> None:
    if not cond:
        raise AutodiffError(f"{op}: {detail}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _image(op: str, x: Tensor) -> None:
    _check(op, x.data.ndim == 4, f"expected a (b, c, h, w) tensor, got shape {x.shape}")


# === Elementwise ===

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise AutodiffError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return record("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise AutodiffError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return record("sub", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise AutodiffError(f"hadamard: shapes {a.shape} and {b.shape} do not broadcast")
    return record("hadamard", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scalar_mul(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scalar_mul", (x,), x.data * s, lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return record("relu", (x,), np.where(on, x.data, 0.0), lambda g: (g * on,))


def lrelu(x: Tensor, slope: float = 0.1) -> Tensor:
    on = x.data > 0
    scale = np.where(on, 1.0, slope)
    return record("lrelu", (x,), x.data * scale, lambda g: (g * scale,))


# === Convolutions ===

def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(b, c, h+2, w+2) padded input -> (b, c*9, h*w) patches"""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 3, 3, h, w))
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col, padding removed"""
    b = cols.shape[0]
    cols = cols.reshape(b, c, 3, 3, h, w)
    xp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di:di + h, dj:dj + w] += cols[:, :, di, dj]
    return xp[:, :, 1:-1, 1:-1]


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1

    weight is (c_out, c_in, 3, 3), bias (c_out,).
    """
    _image("conv2d_3x3", x)
    b, c, h, w = x.shape
    _check("conv2d_3x3", weight.data.ndim == 4 and weight.shape[1:] == (c, 3, 3),
           f"weight {weight.shape} does not match {c} input channels")
    co = weight.shape[0]
    _check("conv2d_3x3", bias.shape == (co,), f"bias {bias.shape} for {co} output channels")

    cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
    W2 = weight.data.reshape(co, c * 9)
    out = np.einsum("ok,bkp->bop", W2, cols, optimize=True).reshape(b, co, h, w)
    out += bias.data[None, :, None, None]

    def vjp(g):
        g2 = g.reshape(b, co, h * w)
        gx = _col2im(np.einsum("ok,bop->bkp", W2, g2, optimize=True), c, h, w)
        gw = np.einsum("bop,bkp->ok", g2, cols, optimize=True).reshape(weight.shape)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d_3x3", (x, weight, bias), out, vjp)


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map across channels; weight (c_out, c_in), bias (c_out,)"""
    _image("conv2d_1x1", x)
    c = x.shape[1]
    _check("conv2d_1x1", weight.data.ndim == 2 and weight.shape[1] == c,
           f"weight {weight.shape} does not match {c} input channels")
    co = weight.shape[0]
    _check("conv2d_1x1", bias.shape == (co,), f"bias {bias.shape} for {co} output channels")
    out = np.einsum("oc,bchw->bohw", weight.data, x.data, optimize=True)
    out += bias.data[None, :, None, None]

    def vjp(g):
        gx = np.einsum("oc,bohw->bchw", weight.data, g, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d_1x1", (x, weight, bias), out, vjp)


# === Normalization ===

def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-image, per-channel normalization over the spatial axes with affine gamma, beta"""
    _image("channel_norm", x)
    c = x.shape[1]
    _check("channel_norm", gamma.shape == (c,) and beta.shape == (c,),
           f"affine parameters {gamma.shape}/{beta.shape} for {c} channels")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gm = gamma.data[None, :, None, None]
    out = gm * xhat + beta.data[None, :, None, None]

    def vjp(g):
        gxhat = g * gm
        gx = inv * (
            gxhat
            - gxhat.mean(axis=(2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record("channel_norm", (x, gamma, beta), out, vjp)


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every pixel's channel vector to unit length"""
    _image("l2_normalize_channels", x)
    norm = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def vjp(g):
        return ((g - y * (y * g).sum(axis=1, keepdims=True)) / norm,)

    return record("l2_normalize_channels", (x,), y, vjp)


# === Structure ===

def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    _check("concat_channels", len(tensors) > 0, "nothing to concatenate")
    for t in tensors:
        _image("concat_channels", t)
    base = tensors[0].shape
    for t in tensors[1:]:
        _check("concat_channels", t.shape[0] == base[0] and t.shape[2:] == base[2:],
               f"shape {t.shape} incompatible with {base}")
    sizes = [t.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return record("concat_channels", tensors, out, lambda g: tuple(np.split(g, splits, axis=1)))


def broadcast_batch(x: Tensor, b: int) -> Tensor:
    """(1, c, h, w) -> (b, c, h, w)"""
    _image("broadcast_batch", x)
    _check("broadcast_batch", x.shape[0] == 1, f"expected batch 1, got {x.shape[0]}")
    out = np.repeat(x.data, b, axis=0)
    return record("broadcast_batch", (x,), out, lambda g: (g.sum(axis=0, keepdims=True),))


def light_shading(normals: Tensor, lights: np.ndarray) -> Tensor:
    """(1, 3, h, w) normals and b x 3 scaled lights -> (b, 1, h, w) n . l (unclamped)"""
    _image("light_shading", normals)
    L = np.asarray(lights, dtype=np.float64)
    _check("light_shading", normals.shape[:2] == (1, 3) and L.ndim == 2 and L.shape[1] == 3,
           f"normals {normals.shape} with lights {L.shape}")
    out = np.einsum("bk,khw->bhw", L, normals.data[0])[:, None]

    def vjp(g):
        return (np.einsum("bk,bhw->khw", L, g[:, 0])[None],)

    return record("light_shading", (normals,), out, vjp)


def specular_guide(normals: Tensor, directions: np.ndarray, mask=None) -> Tensor:
    """(1, 3, h, w) normals and b x 3 unit lights -> (b, 1, h, w) R = v . (2 (n . l) n - l), v = (0, 0, 1)

    Zero where `mask` is False.
    """
    _image("specular_guide", normals)
    L = np.asarray(directions, dtype=np.float64)
    _check("specular_guide", normals.shape[:2] == (1, 3) and L.ndim == 2 and L.shape[1] == 3,
           f"normals {normals.shape} with lights {L.shape}")
    m = np.ones(normals.shape[2:]) if mask is None else np.asarray(mask, dtype=np.float64)
    _check("specular_guide", m.shape == normals.shape[2:], f"mask {m.shape} for normals {normals.shape[2:]}")
    n = normals.data[0]
    nl = np.einsum("bk,khw->bhw", L, n)
    out = ((2.0 * nl * n[2][None] - L[:, 2][:, None, None]) * m[None])[:, None]

    def vjp(g):
        gm = g[:, 0] * m[None]
        gn = 2.0 * np.einsum("bk,bhw->khw", L, gm * n[2][None])
        gn[2] += 2.0 * (gm * nl).sum(axis=0)
        return (gn[None],)

    return record("specular_guide", (normals,), out, vjp)


def linear_operator(
    x: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    name: str = "linear_operator",
) -> Tensor:
    """Apply a fixed linear map whose adjoint is supplied explicitly"""
    out = np.asarray(forward(x.data), dtype=np.float64)
    return record(name, (x,), out, lambda g: (np.asarray(adjoint(g)).reshape(x.shape),))


# === Reductions ===

def sum_all(x: Tensor) -> Tensor:
    return record("sum_all", (x,), np.array(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def _weights(op: str, x: Tensor, mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    try:
        W = np.broadcast_to(m, x.shape)
    except ValueError:
        raise AutodiffError(f"{op}: mask {m.shape} does not broadcast to {x.shape}")
    return W


def masked_mean_abs(x: Tensor, mask) -> Tensor:
    """Mean of |x| over the entries selected by a 0/1 mask broadcast to x"""
    W = _weights("masked_mean_abs", x, mask)
    count = W.sum()
    _check("masked_mean_abs", count > 0, "mask selects no entry")
    out = np.array((np.abs(x.data) * W).sum() / count)
    return record("masked_mean_abs", (x,), out, lambda g: (float(g) * np.sign(x.data) * W / count,))


def masked_mean_sqnorm(x: Tensor, mask) -> Tensor:
    """Mean over masked pixels of the squared channel norm of x (b, c, h, w)"""
    _image("masked_mean_sqnorm", x)
    m = np.asarray(mask, dtype=np.float64)
    _check("masked_mean_sqnorm", m.shape == x.shape[2:], f"mask {m.shape} for images {x.shape[2:]}")
    count = x.shape[0] * m.sum()
    _check("masked_mean_sqnorm", count > 0, "mask selects no pixel")
    W = m[None, None]
    out = np.array(((x.data ** 2) * W).sum() / count)
    return record("masked_mean_sqnorm", (x,), out, lambda g: (float(g) * 2.0 * x.data * W / count,))
