"""Numpy fallback for the 3x3 convolution hot path (im2col + BLAS)."""

import numpy as np


def _im2col(x):
    """Gather padded 3x3 patches of x (C,H,W) into a (C*9, H*W) matrix."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * 9, h * w)


def conv3x3_forward(x, w, b):
    """Convolve x (C_in,H,W) with w (C_out,C_in,3,3) + b (C_out,); padding 1, stride 1."""
    c_out = w.shape[0]
    _, h, wid = x.shape
    out = w.reshape(c_out, -1) @ _im2col(x)
    return out.reshape(c_out, h, wid) + b[:, None, None]


def conv3x3_backward(x, w, g):
    """Gradients of conv3x3_forward given upstream g (C_out,H,W).

    Returns (gx, gw, gb). gx is the correlation of g with the spatially
    flipped, channel-transposed kernel, which is again a padded 3x3 conv.
    """
    c_out, c_in = w.shape[0], w.shape[1]
    _, h, wid = x.shape
    gb = g.sum(axis=(1, 2))
    gw = (g.reshape(c_out, -1) @ _im2col(x).T).reshape(c_out, c_in, 3, 3)
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = (w_rot.reshape(c_in, -1) @ _im2col(g)).reshape(c_in, h, wid)
    return gx, gw, gb
