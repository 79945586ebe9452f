"""Numpy implementation of the fused conv/ReLU/max-over-time kernel.

Used when the compiled extension is unavailable or disabled.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_relu_maxpool_forward(x, lengths, w, b):
    """Batched valid convolution, rectifier and masked max-over-time.

    x: (B, T, D) inputs, lengths: (B,) valid lengths (each >= filter width),
    w: (M, W, D) filters, b: (M,) biases.
    Returns pooled (B, M) and the first maximal time index (B, M).
    """
    n_batch, _, _ = x.shape
    width = w.shape[1]
    windows = sliding_window_view(x, width, axis=1)  # (B, T-W+1, D, W)
    z = np.einsum("btdk,mkd->bmt", windows, w) + b[None, :, None]
    n_pos = z.shape[2]
    valid = np.arange(n_pos)[None, :] < (lengths[:, None] - width + 1)
    z = np.where(valid[:, None, :], z, -np.inf)
    arg = z.argmax(axis=2)
    best = np.take_along_axis(z, arg[:, :, None], axis=2)[:, :, 0]
    pooled = np.maximum(best, 0.0).astype(x.dtype, copy=False)
    return pooled, arg.astype(np.intp)


def conv_relu_maxpool_backward(grad, pooled, arg, x, w, need_dx=False):
    width = w.shape[1]
    gz = np.where(pooled > 0, grad, 0.0).astype(x.dtype, copy=False)
    n_batch = x.shape[0]
    # (B, M, W) time indices of the winning window, gathered to (B, M, W, D)
    idx = arg[:, :, None] + np.arange(width)[None, None, :]
    xwin = x[np.arange(n_batch)[:, None, None], idx]
    dw = np.einsum("bm,bmkd->mkd", gz, xwin)
    db = gz.sum(axis=0)
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        contrib = gz[:, :, None, None] * w[None, :, :, :]  # (B, M, W, D)
        np.add.at(dx, (np.arange(n_batch)[:, None, None], idx), contrib)
    return dw, db, dx
