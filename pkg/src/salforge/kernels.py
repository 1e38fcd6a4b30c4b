"""Inner-loop kernels for convolution and pooling.

Every kernel has two implementations with identical results:

* ``*_loops`` -- explicit loops, compiled by numba when enabled;
* ``*_numpy`` -- vectorized numpy (stride tricks / fancy indexing).

The public names (``im2col``, ``col2im``, ``maxpool2_forward``,
``maxpool2_backward``) dispatch on :data:`salforge._accel.USE_NUMBA`.
All arrays are float64, batched ``(B, C, H, W)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from salforge._accel import USE_NUMBA, njit


def out_size(size, n, pad, stride):
    return (size + 2 * pad - n) // stride + 1


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


@njit
def im2col_loops(x, n, pad, stride):
    b_, c_, h, w = x.shape
    ho = (h + 2 * pad - n) // stride + 1
    wo = (w + 2 * pad - n) // stride + 1
    cols = np.zeros((b_, c_ * n * n, ho * wo))
    for b in range(b_):
        for c in range(c_):
            for ki in range(n):
                for kj in range(n):
                    row = (c * n + ki) * n + kj
                    for i in range(ho):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        for j in range(wo):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            cols[b, row, i * wo + j] = x[b, c, y, xx]
    return cols


@njit
def col2im_loops(cols, b_, c_, h, w, n, pad, stride):
    ho = (h + 2 * pad - n) // stride + 1
    wo = (w + 2 * pad - n) // stride + 1
    x = np.zeros((b_, c_, h, w))
    for b in range(b_):
        for c in range(c_):
            for ki in range(n):
                for kj in range(n):
                    row = (c * n + ki) * n + kj
                    for i in range(ho):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        for j in range(wo):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= w:
                                continue
                            x[b, c, y, xx] += cols[b, row, i * wo + j]
    return x


def im2col_numpy(x, n, pad, stride):
    b_, c_, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (n, n), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, n, n) -> (B, C, n, n, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b_, c_ * n * n, ho * wo)
    return np.ascontiguousarray(cols)


def col2im_numpy(cols, b_, c_, h, w, n, pad, stride):
    ho = out_size(h, n, pad, stride)
    wo = out_size(w, n, pad, stride)
    xp = np.zeros((b_, c_, h + 2 * pad, w + 2 * pad))
    patches = cols.reshape(b_, c_, n, n, ho, wo)
    for ki in range(n):
        for kj in range(n):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += patches[:, :, ki, kj]
    return xp[:, :, pad:pad + h, pad:pad + w].copy()


# --------------------------------------------------------------------------
# 2x2 max pooling, stride 2 (odd trailing rows/cols are dropped)
# --------------------------------------------------------------------------


@njit
def maxpool2_forward_loops(x):
    b_, c_, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((b_, c_, ho, wo))
    arg = np.empty((b_, c_, ho, wo), dtype=np.int64)
    for b in range(b_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, c, 2 * i, 2 * j]
                    k = 0
                    for d in range(1, 4):
                        v = x[b, c, 2 * i + d // 2, 2 * j + d % 2]
                        if v > best:
                            best = v
                            k = d
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = k
    return out, arg


@njit
def maxpool2_backward_loops(grad, arg, h, w):
    b_, c_, ho, wo = grad.shape
    dx = np.zeros((b_, c_, h, w))
    for b in range(b_):
        for c in range(c_):
            for i in range(ho):
                for j in range(wo):
                    k = arg[b, c, i, j]
                    dx[b, c, 2 * i + k // 2, 2 * j + k % 2] += grad[b, c, i, j]
    return dx


def maxpool2_forward_numpy(x):
    b_, c_, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(b_, c_, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b_, c_, ho, wo, 4)
    # argmax returns the first maximum, matching the strict ">" in the loop kernel
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def maxpool2_backward_numpy(grad, arg, h, w):
    b_, c_, ho, wo = grad.shape
    onehot = (arg[..., None] == np.arange(4)) * grad[..., None]
    blocks = onehot.reshape(b_, c_, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((b_, c_, h, w))
    dx[:, :, :2 * ho, :2 * wo] = blocks.reshape(b_, c_, 2 * ho, 2 * wo)
    return dx


if USE_NUMBA:
    im2col = im2col_loops
    col2im = col2im_loops
    maxpool2_forward = maxpool2_forward_loops
    maxpool2_backward = maxpool2_backward_loops
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2_forward = maxpool2_forward_numpy
    maxpool2_backward = maxpool2_backward_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
