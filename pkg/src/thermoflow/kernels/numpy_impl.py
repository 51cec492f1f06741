"""Pure-numpy implementations of the hot kernels.

Every function here has a numba twin in ``numba_impl`` with identical
signatures and semantics; ``thermoflow.kernels`` picks one at import
time.  These are the fallback path and the reference the benchmark
compares against.
"""

import numpy as np

NAME = "numpy"


def shift_gather(xpad, ki, kj, stride, out_h, out_w):
    """Contiguous copy of one kernel-offset plane of a padded NHWC batch.

    Convolution runs as one GEMM per kernel offset on these planes,
    which keeps peak memory at input size instead of the k*k-fold
    blow-up of an im2col buffer.
    """
    return np.ascontiguousarray(
        xpad[:, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride, :]
    )


def shift_scatter_add(gxpad, gbuf, ki, kj, stride):
    """Accumulate one offset plane back onto the padded gradient; the
    adjoint of shift_gather."""
    oh, ow = gbuf.shape[1], gbuf.shape[2]
    gxpad[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :] += gbuf


def layernorm_forward(x2d, eps):
    """Row-wise normalization to zero mean / unit variance (no affine).

    Returns (xhat, rstd) with rstd = 1/sqrt(var + eps), both needed by backward.
    """
    mean = x2d.mean(axis=1, keepdims=True)
    centered = x2d - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return centered * rstd, rstd


def layernorm_backward(g2d, xhat2d, rstd):
    """Gradient of layernorm_forward w.r.t. its input."""
    gm = g2d.mean(axis=1, keepdims=True)
    gxm = np.mean(g2d * xhat2d, axis=1, keepdims=True)
    return rstd * (g2d - gm - xhat2d * gxm)


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam update, in place on flat float64 arrays."""
    if weight_decay != 0.0:
        p -= lr * weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample of an (H, W, C) float64 image, pixel-center aligned.

    With out_h == H and out_w == W the source coordinates are exactly the
    integer grid, so the output equals the input bitwise.
    """
    h, w, _ = img.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    return top * (1.0 - wy) + bot * wy


def separable_filter_valid(img, kernel1d):
    """Correlate a 2-D image with kernel1d along rows then columns, valid mode."""
    k = kernel1d.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ kernel1d
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ kernel1d
