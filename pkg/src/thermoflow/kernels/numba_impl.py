"""Numba-jitted implementations of the hot kernels.

Same signatures and semantics as ``numpy_impl``; loops are fused into
single passes.  fastmath stays off and nothing runs in parallel so a
fixed seed gives bit-identical results from run to run.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def shift_gather(xpad, ki, kj, stride, out_h, out_w):
    b, _, _, c = xpad.shape
    out = np.empty((b, out_h, out_w, c), dtype=np.float64)
    for n in range(b):
        for i in range(out_h):
            src_i = ki + i * stride
            for j in range(out_w):
                src_j = kj + j * stride
                for ch in range(c):
                    out[n, i, j, ch] = xpad[n, src_i, src_j, ch]
    return out


@njit(cache=True)
def shift_scatter_add(gxpad, gbuf, ki, kj, stride):
    b, oh, ow, c = gbuf.shape
    for n in range(b):
        for i in range(oh):
            dst_i = ki + i * stride
            for j in range(ow):
                dst_j = kj + j * stride
                for ch in range(c):
                    gxpad[n, dst_i, dst_j, ch] += gbuf[n, i, j, ch]


@njit(cache=True)
def layernorm_forward(x2d, eps):
    n, d = x2d.shape
    xhat = np.empty_like(x2d)
    rstd = np.empty((n, 1), dtype=np.float64)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x2d[i, j]
        mean = s / d
        sq = 0.0
        for j in range(d):
            diff = x2d[i, j] - mean
            sq += diff * diff
        r = 1.0 / np.sqrt(sq / d + eps)
        rstd[i, 0] = r
        for j in range(d):
            xhat[i, j] = (x2d[i, j] - mean) * r
    return xhat, rstd


@njit(cache=True)
def layernorm_backward(g2d, xhat2d, rstd):
    n, d = g2d.shape
    gx = np.empty_like(g2d)
    for i in range(n):
        gm = 0.0
        gxm = 0.0
        for j in range(d):
            gm += g2d[i, j]
            gxm += g2d[i, j] * xhat2d[i, j]
        gm /= d
        gxm /= d
        r = rstd[i, 0]
        for j in range(d):
            gx[i, j] = r * (g2d[i, j] - gm - xhat2d[i, j] * gxm)
    return gx


@njit(cache=True)
def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(p.shape[0]):
        pi = p[i]
        if weight_decay != 0.0:
            pi -= lr * weight_decay * pi
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] = pi - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


@njit(cache=True)
def bilinear_resize(img, out_h, out_w):
    h, w, c = img.shape
    out = np.empty((out_h, out_w, c), dtype=np.float64)
    sy = h / out_h
    sx = w / out_w
    for i in range(out_h):
        y = (i + 0.5) * sy - 0.5
        y0 = int(np.floor(y))
        if y0 < 0:
            y0 = 0
        if y0 > h - 1:
            y0 = h - 1
        y1 = min(y0 + 1, h - 1)
        wy = min(max(y - y0, 0.0), 1.0)
        for j in range(out_w):
            x = (j + 0.5) * sx - 0.5
            x0 = int(np.floor(x))
            if x0 < 0:
                x0 = 0
            if x0 > w - 1:
                x0 = w - 1
            x1 = min(x0 + 1, w - 1)
            wx = min(max(x - x0, 0.0), 1.0)
            for ch in range(c):
                top = img[y0, x0, ch] * (1.0 - wx) + img[y0, x1, ch] * wx
                bot = img[y1, x0, ch] * (1.0 - wx) + img[y1, x1, ch] * wx
                out[i, j, ch] = top * (1.0 - wy) + bot * wy
    return out


@njit(cache=True)
def separable_filter_valid(img, kernel1d):
    h, w = img.shape
    k = kernel1d.shape[0]
    rw = w - k + 1
    rh = h - k + 1
    rows = np.empty((h, rw), dtype=np.float64)
    for i in range(h):
        for j in range(rw):
            acc = 0.0
            for t in range(k):
                acc += img[i, j + t] * kernel1d[t]
            rows[i, j] = acc
    out = np.empty((rh, rw), dtype=np.float64)
    for i in range(rh):
        for j in range(rw):
            acc = 0.0
            for t in range(k):
                acc += rows[i + t, j] * kernel1d[t]
            out[i, j] = acc
    return out
