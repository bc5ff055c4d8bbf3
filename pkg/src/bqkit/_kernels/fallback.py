"""Pure-numpy kernels, used when the compiled core is unavailable.

Shapes are channels-first: x [B,C,H,W], w [O,C,k,k]. All buffers float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return x, win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, b, stride, pad):
    _, win = _windows(x, w.shape[2], stride, pad)
    y = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    return y + b[None, :, None, None]


def conv2d_backward(x, w, dy, stride, pad):
    k = w.shape[2]
    xp, win = _windows(x, k, stride, pad)
    db = dy.sum(axis=(0, 2, 3))
    dw = np.einsum("bohw,bchwij->ocij", dy, win, optimize=True)
    dxp = np.zeros_like(xp)
    ho, wo = dy.shape[2], dy.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                "bohw,oc->bchw", dy, w[:, :, i, j], optimize=True
            )
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp, dw, db


def kmeans_assign(points, centroids):
    """Nearest centroid per point (ties to the lowest index) + squared distance."""
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    sqd = np.empty(n, dtype=np.float64)
    step = 1 << 14
    for lo in range(0, n, step):
        hi = min(lo + step, n)
        d2 = ((points[lo:hi, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels[lo:hi] = np.argmin(d2, axis=1)
        sqd[lo:hi] = d2[np.arange(hi - lo), labels[lo:hi]]
    return labels, sqd
