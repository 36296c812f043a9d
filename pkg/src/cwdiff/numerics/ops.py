"""Forward/backward pairs for every op the graph engine knows.

Each forward takes the list of input arrays and the node attributes and
returns ``(output, cache)``; each backward takes the output gradient and the
cache and returns one gradient (or ``None``) per input. Images are NHWC.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels


class ShapeError(ValueError):
    def __init__(self, node_id: int, msg: str):
        super().__init__(f"node {node_id}: {msg}")
        self.node_id = node_id


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- affine -----------------------------------------------------------------

def linear_fwd(xs, attrs, ctx):
    x, w, b = xs
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear expects (N, {w.shape[0]}), got {x.shape}")
    return x @ w + b, (x, w)


def linear_bwd(g, cache, attrs):
    x, w = cache
    return [g @ w.T, x.T @ g, g.sum(axis=0)]


def conv3x3_fwd(xs, attrs, ctx):
    x, w, b = xs
    if x.ndim != 4 or w.shape[:3] != (3, 3, x.shape[3]):
        raise ValueError(f"conv3x3 weight {w.shape} incompatible with input {x.shape}")
    bsz, h, wd, c = x.shape
    cols = kernels.im2col3x3(x)
    y = cols.reshape(bsz * h * wd, 9 * c) @ w.reshape(9 * c, -1) + b
    return y.reshape(bsz, h, wd, -1), (cols, w, x.shape)


def conv3x3_bwd(g, cache, attrs):
    cols, w, xshape = cache
    bsz, h, wd, c = xshape
    co = w.shape[3]
    g2 = g.reshape(-1, co)
    c2 = cols.reshape(-1, 9 * c)
    dw = (c2.T @ g2).reshape(w.shape)
    dcols = (g2 @ w.reshape(9 * c, co).T).reshape(bsz, h, wd, 9, c)
    return [kernels.col2im3x3(dcols), dw, g2.sum(axis=0)]


# -- resampling ---------------------------------------------------------------

def down2_fwd(xs, attrs, ctx):
    (x,) = xs
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"down2 needs even spatial size, got {x.shape}")
    return np.ascontiguousarray(x[:, ::2, ::2, :]), x.shape


def down2_bwd(g, shape, attrs):
    out = np.zeros(shape, dtype=g.dtype)
    out[:, ::2, ::2, :] = g
    return [out]


def up2_fwd(xs, attrs, ctx):
    (x,) = xs
    return x.repeat(2, axis=1).repeat(2, axis=2), None


def up2_bwd(g, cache, attrs):
    b, h, w, c = g.shape
    return [g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))]


# -- activations --------------------------------------------------------------

def silu_fwd(xs, attrs, ctx):
    (x,) = xs
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(g, cache, attrs):
    x, s = cache
    return [g * s * (1.0 + x * (1.0 - s))]


def tanh_fwd(xs, attrs, ctx):
    y = np.tanh(xs[0])
    return y, y


def tanh_bwd(g, y, attrs):
    return [g * (1.0 - y * y)]


def expm1pos_fwd(xs, attrs, ctx):
    (x,) = xs
    pos = x > 0
    y = np.expm1(np.where(pos, x, 0))
    return y, (pos, y)


def expm1pos_bwd(g, cache, attrs):
    pos, y = cache
    return [np.where(pos, g * (y + 1.0), 0).astype(g.dtype)]


# -- normalization ------------------------------------------------------------

def groupnorm_fwd(xs, attrs, ctx):
    x, gamma, beta = xs
    groups = attrs["groups"]
    if x.ndim != 4 or x.shape[3] % groups:
        raise ValueError(f"{x.shape} not divisible into {groups} channel groups")
    y, xhat, rstd = kernels.groupnorm_fwd(x, gamma, beta, groups, attrs.get("eps", 1e-5))
    return y, (xhat, rstd, gamma, groups)


def groupnorm_bwd(g, cache, attrs):
    xhat, rstd, gamma, groups = cache
    dx, dgamma, dbeta = kernels.groupnorm_bwd(g, xhat, rstd, gamma, groups)
    return [dx, dgamma, dbeta]


def batchnorm_fwd(xs, attrs, ctx):
    x, gamma, beta, run_mean, run_var = xs
    eps = attrs.get("eps", 1e-5)
    if ctx.training:
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        mom = attrs.get("momentum", 0.1)
        n = x.shape[0]
        unbiased = var * (n / max(n - 1, 1))
        ctx.buffer_updates[attrs["mean_name"]] = (1 - mom) * run_mean + mom * mu
        ctx.buffer_updates[attrs["var_name"]] = (1 - mom) * run_var + mom * unbiased
        return xhat * gamma + beta, (xhat, rstd, gamma, True)
    rstd = 1.0 / np.sqrt(run_var + eps)
    xhat = (x - run_mean) * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma, False)


def batchnorm_bwd(g, cache, attrs):
    xhat, rstd, gamma, batch_stats = cache
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxh = g * gamma
    if batch_stats:
        dx = (dxh - dxh.mean(axis=0) - xhat * (dxh * xhat).mean(axis=0)) * rstd
    else:
        dx = dxh * rstd
    return [dx, dgamma, dbeta, None, None]


# -- elementwise / structural -------------------------------------------------

def add_fwd(xs, attrs, ctx):
    a, b = xs
    return a + b, (a.shape, b.shape)


def add_bwd(g, shapes, attrs):
    return [_unbroadcast(g, shapes[0]), _unbroadcast(g, shapes[1])]


def mul_fwd(xs, attrs, ctx):
    a, b = xs
    return a * b, (a, b)


def mul_bwd(g, cache, attrs):
    a, b = cache
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def affine_fwd(xs, attrs, ctx):
    return xs[0] * attrs["scale"] + attrs["shift"], None


def affine_bwd(g, cache, attrs):
    return [g * attrs["scale"]]


def concat_fwd(xs, attrs, ctx):
    lead = [x.shape[:-1] for x in xs]
    if any(s != lead[0] for s in lead):
        raise ValueError(f"concat leading shapes differ: {lead}")
    return np.concatenate(xs, axis=-1), [x.shape[-1] for x in xs]


def concat_bwd(g, sizes, attrs):
    cuts = np.cumsum(sizes)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(g, cuts, axis=-1)]


def reshape_fwd(xs, attrs, ctx):
    (x,) = xs
    return x.reshape(attrs["shape"]), x.shape


def reshape_bwd(g, shape, attrs):
    return [g.reshape(shape)]


def meanpool_fwd(xs, attrs, ctx):
    (x,) = xs
    return x.mean(axis=(1, 2)), x.shape


def meanpool_bwd(g, shape, attrs):
    b, h, w, c = shape
    return [np.broadcast_to(g[:, None, None, :] / (h * w), shape).copy()]


def mse_fwd(xs, attrs, ctx):
    pred, target = xs[0], xs[1]
    if pred.shape != target.shape:
        raise ValueError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    r = pred - target
    if len(xs) == 3:
        mask = np.broadcast_to(xs[2], r.shape)
        denom = max(float(mask.sum()), 1.0)
        return np.asarray((mask * r * r).sum() / denom, dtype=pred.dtype), (r, mask, denom)
    denom = float(r.size)
    return np.asarray((r * r).sum() / denom, dtype=pred.dtype), (r, None, denom)


def mse_bwd(g, cache, attrs):
    r, mask, denom = cache
    d = (2.0 * g / denom) * r
    if mask is not None:
        d = d * mask
    d = d.astype(r.dtype)
    grads = [d, -d]
    if mask is not None:
        grads.append(None)
    return grads


OPS: dict[str, tuple[Callable, Callable]] = {
    "linear": (linear_fwd, linear_bwd),
    "conv3x3": (conv3x3_fwd, conv3x3_bwd),
    "down2": (down2_fwd, down2_bwd),
    "up2": (up2_fwd, up2_bwd),
    "silu": (silu_fwd, silu_bwd),
    "tanh": (tanh_fwd, tanh_bwd),
    "expm1pos": (expm1pos_fwd, expm1pos_bwd),
    "groupnorm": (groupnorm_fwd, groupnorm_bwd),
    "batchnorm": (batchnorm_fwd, batchnorm_bwd),
    "add": (add_fwd, add_bwd),
    "mul": (mul_fwd, mul_bwd),
    "affine": (affine_fwd, affine_bwd),
    "concat": (concat_fwd, concat_bwd),
    "reshape": (reshape_fwd, reshape_bwd),
    "meanpool": (meanpool_fwd, meanpool_bwd),
    "mse": (mse_fwd, mse_bwd),
}
