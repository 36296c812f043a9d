"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``CWDIFF_NO_NUMBA`` is unset
(or ``0``). im2col/col2im and the shading sums accumulate in the same order on both
paths and agree bitwise; group normalization reduces in a different order
and agrees to rounding.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("CWDIFF_NO_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAS_NUMBA = False


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# 3x3 im2col / col2im on NHWC tensors, zero padding 1.
# cols layout: (B, H, W, 9, C) with tap k = 3*ky + kx.


def im2col3x3_numpy(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols


def col2im3x3_numpy(cols: np.ndarray) -> np.ndarray:
    b, h, w, _, c = cols.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            xp[:, ky:ky + h, kx:kx + w, :] += cols[:, :, :, 3 * ky + kx, :]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1, :])


def shade_numpy(env, cos_l, spec_w):
    """Quadrature sums per pixel.

    env: (P, C, 3) radiance; cos_l: (P, C) cosine weights times solid angle;
    spec_w: (P, C) specular lobe weights times solid angle.
    Returns (irradiance-like sum (P, 3), specular sum (P, 3)).
    """
    d = np.zeros((env.shape[0], 3), dtype=env.dtype)
    s = np.zeros((env.shape[0], 3), dtype=env.dtype)
    for j in range(env.shape[1]):
        d += env[:, j, :] * cos_l[:, j, None]
        s += env[:, j, :] * spec_w[:, j, None]
    return d, s


def groupnorm_fwd_numpy(x, gamma, beta, groups, eps):
    b, h, w, c = x.shape
    xg = x.reshape(b, h * w, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(b, h, w, c)
    return xhat * gamma + beta, xhat, rstd.reshape(b, groups)


def groupnorm_bwd_numpy(g, xhat, rstd, gamma, groups):
    b, h, w, c = xhat.shape
    dgamma = (g * xhat).sum(axis=(0, 1, 2))
    dbeta = g.sum(axis=(0, 1, 2))
    dxh = (g * gamma).reshape(b, h * w, groups, c // groups)
    xh = xhat.reshape(b, h * w, groups, c // groups)
    m1 = dxh.mean(axis=(1, 3), keepdims=True)
    m2 = (dxh * xh).mean(axis=(1, 3), keepdims=True)
    dx = (dxh - m1 - xh * m2) * rstd.reshape(b, 1, groups, 1)
    return dx.reshape(b, h, w, c), dgamma, dbeta


if HAS_NUMBA:

    @njit(cache=True)
    def _im2col3x3_nb(x, cols):
        b, h, w, c = x.shape
        for n in range(b):
            for y in range(h):
                for xx in range(w):
                    for ky in range(3):
                        sy = y + ky - 1
                        for kx in range(3):
                            sx = xx + kx - 1
                            k = 3 * ky + kx
                            if sy < 0 or sy >= h or sx < 0 or sx >= w:
                                for ch in range(c):
                                    cols[n, y, xx, k, ch] = 0.0
                            else:
                                for ch in range(c):
                                    cols[n, y, xx, k, ch] = x[n, sy, sx, ch]

    @njit(cache=True)
    def _col2im3x3_nb(cols, out):
        b, h, w, _, c = cols.shape
        # same tap order as the numpy path: outer loop over taps
        for ky in range(3):
            for kx in range(3):
                k = 3 * ky + kx
                for n in range(b):
                    for y in range(h):
                        ty = y + ky - 1
                        if ty < 0 or ty >= h:
                            continue
                        for xx in range(w):
                            tx = xx + kx - 1
                            if tx < 0 or tx >= w:
                                continue
                            for ch in range(c):
                                out[n, ty, tx, ch] += cols[n, y, xx, k, ch]

    @njit(cache=True)
    def _shade_nb(env, cos_l, spec_w, d, s):
        p, cn, _ = env.shape
        for j in range(cn):
            for i in range(p):
                cl = cos_l[i, j]
                sw = spec_w[i, j]
                for ch in range(3):
                    d[i, ch] += env[i, j, ch] * cl
                    s[i, ch] += env[i, j, ch] * sw

    @njit(cache=True)
    def _gn_fwd_nb(x, gamma, beta, groups, eps, y, xhat, rstd):
        b, h, w, c = x.shape
        cg = c // groups
        cnt = h * w * cg
        for n in range(b):
            for gi in range(groups):
                s = 0.0
                for i in range(h):
                    for j in range(w):
                        for k in range(gi * cg, (gi + 1) * cg):
                            s += x[n, i, j, k]
                mu = s / cnt
                s2 = 0.0
                for i in range(h):
                    for j in range(w):
                        for k in range(gi * cg, (gi + 1) * cg):
                            d = x[n, i, j, k] - mu
                            s2 += d * d
                r = 1.0 / np.sqrt(s2 / cnt + eps)
                rstd[n, gi] = r
                for i in range(h):
                    for j in range(w):
                        for k in range(gi * cg, (gi + 1) * cg):
                            xh = (x[n, i, j, k] - mu) * r
                            xhat[n, i, j, k] = xh
                            y[n, i, j, k] = xh * gamma[k] + beta[k]

    @njit(cache=True)
    def _gn_bwd_nb(g, xhat, rstd, gamma, groups, dx, dgamma, dbeta):
        b, h, w, c = xhat.shape
        cg = c // groups
        cnt = h * w * cg
        for n in range(b):
            for gi in range(groups):
                m1 = 0.0
                m2 = 0.0
                for i in range(h):
                    for j in range(w):
                        for k in range(gi * cg, (gi + 1) * cg):
                            d = g[n, i, j, k] * gamma[k]
                            m1 += d
                            m2 += d * xhat[n, i, j, k]
                m1 /= cnt
                m2 /= cnt
                r = rstd[n, gi]
                for i in range(h):
                    for j in range(w):
                        for k in range(gi * cg, (gi + 1) * cg):
                            gv = g[n, i, j, k]
                            xh = xhat[n, i, j, k]
                            dx[n, i, j, k] = (gv * gamma[k] - m1 - xh * m2) * r
                            dgamma[k] += gv * xh
                            dbeta[k] += gv

    def groupnorm_fwd_numba(x, gamma, beta, groups, eps):
        x = np.ascontiguousarray(x)
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty((x.shape[0], groups), dtype=x.dtype)
        _gn_fwd_nb(x, gamma.astype(x.dtype), beta.astype(x.dtype), groups, eps, y, xhat, rstd)
        return y, xhat, rstd

    def groupnorm_bwd_numba(g, xhat, rstd, gamma, groups):
        g = np.ascontiguousarray(g)
        dx = np.empty_like(xhat)
        c = xhat.shape[3]
        dgamma = np.zeros(c, dtype=xhat.dtype)
        dbeta = np.zeros(c, dtype=xhat.dtype)
        _gn_bwd_nb(g, xhat, rstd, gamma.astype(xhat.dtype), groups, dx, dgamma, dbeta)
        return dx, dgamma, dbeta

    def im2col3x3_numba(x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x)
        b, h, w, c = x.shape
        cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
        _im2col3x3_nb(x, cols)
        return cols

    def col2im3x3_numba(cols: np.ndarray) -> np.ndarray:
        cols = np.ascontiguousarray(cols)
        b, h, w, _, c = cols.shape
        out = np.zeros((b, h, w, c), dtype=cols.dtype)
        _col2im3x3_nb(cols, out)
        return out

    def shade_numba(env, cos_l, spec_w):
        env = np.ascontiguousarray(env)
        cos_l = np.ascontiguousarray(cos_l, dtype=env.dtype)
        spec_w = np.ascontiguousarray(spec_w, dtype=env.dtype)
        d = np.zeros((env.shape[0], 3), dtype=env.dtype)
        s = np.zeros((env.shape[0], 3), dtype=env.dtype)
        _shade_nb(env, cos_l, spec_w, d, s)
        return d, s

    im2col3x3 = im2col3x3_numba
    col2im3x3 = col2im3x3_numba
    shade = shade_numba
    groupnorm_fwd = groupnorm_fwd_numba
    groupnorm_bwd = groupnorm_bwd_numba
else:
    im2col3x3 = im2col3x3_numpy
    col2im3x3 = col2im3x3_numpy
    shade = shade_numpy
    groupnorm_fwd = groupnorm_fwd_numpy
    groupnorm_bwd = groupnorm_bwd_numpy
