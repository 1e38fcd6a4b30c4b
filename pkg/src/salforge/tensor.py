"""Dense numeric kernels shared by the network, saliency and evaluation code.

Tensors are plain ``numpy.ndarray`` objects in float64, channel-first
(``K x H x W``). Convolution is always expressed as a matrix product with
the unfolded input so that NormGrad's unfolded-activation machinery and the
network's own convolution share a single code path.
"""

import math

import numpy as np

from salforge import kernels
from salforge.errors import DimensionError


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected K x H x W or B x K x H x W input, got shape {x.shape}")


def unfold(x, n, pad=None):
    """Extract every ``n x n`` patch of ``x`` (``K x H x W``) as a column.

    Returns a ``(n*n*K) x (H*W)`` matrix whose column ``u`` is the
    zero-padded patch centred on spatial position ``u`` (row-major), rows
    ordered channel-major then kernel row then kernel column.
    """
    if n < 1 or n % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {n}")
    if pad is None:
        pad = (n - 1) // 2
    if pad != (n - 1) // 2:
        raise ValueError(f"unfold requires same-size padding {(n - 1) // 2} for n={n}, got {pad}")
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold expects K x H x W, got shape {x.shape}")
    return kernels.im2col(x[None], n, pad, 1)[0]


def fold(cols, shape, n, pad=None):
    """Overlap-add columns back onto a ``K x H x W`` grid (adjoint of unfold)."""
    if pad is None:
        pad = (n - 1) // 2
    k, h, w = shape
    return kernels.col2im(as_tensor(cols)[None], 1, k, h, w, n, pad, 1)[0]


def _check_conv(x, weights, bias):
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise DimensionError(f"weights must be K' x K x N x N, got shape {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"input channel axis 1 has {x.shape[1]} channels but weights axis 1 expects {weights.shape[1]}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match weights axis 0 ({weights.shape[0]})")


def conv2d_forward(x, weights, bias=None, stride=1, pad=0, return_cols=False):
    """Convolution (cross-correlation) through ``unfold`` and a matrix product.

    Accepts a single ``K x H x W`` input or a batch ``B x K x H x W``.
    With ``return_cols`` the unfolded input is returned as well so that a
    later backward pass can reuse it.
    """
    if pad < 0 or stride < 1:
        raise ValueError(f"need pad >= 0 and stride >= 1, got pad={pad}, stride={stride}")
    xb, single = _batched(x)
    weights = as_tensor(weights)
    bias = None if bias is None else as_tensor(bias)
    _check_conv(xb, weights, bias)
    k_out, _, n, _ = weights.shape
    b_, _, h, w = xb.shape
    ho = kernels.out_size(h, n, pad, stride)
    wo = kernels.out_size(w, n, pad, stride)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {n}x{n} does not fit input {h}x{w} with pad {pad}")
    cols = kernels.im2col(xb, n, pad, stride)
    out = np.matmul(weights.reshape(k_out, -1), cols)
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(b_, k_out, ho, wo)
    if single:
        out = out[0]
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, weights, upstream_grad, stride=1, pad=0, cols=None, need_input_grad=True):
    """Gradients of a convolution w.r.t. input, weights and bias.

    The weight gradient is the sum over positions of the outer products of
    upstream gradient columns with unfolded input columns.
    """
    xb, single = _batched(x)
    weights = as_tensor(weights)
    gb, _ = _batched(upstream_grad)
    _check_conv(xb, weights, None)
    k_out, k_in, n, _ = weights.shape
    b_, _, h, w = xb.shape
    ho = kernels.out_size(h, n, pad, stride)
    wo = kernels.out_size(w, n, pad, stride)
    if gb.shape != (b_, k_out, ho, wo):
        raise DimensionError(f"upstream gradient shape {gb.shape[1:]} != forward output shape {(k_out, ho, wo)}")
    if cols is None:
        cols = kernels.im2col(xb, n, pad, stride)
    g2 = gb.reshape(b_, k_out, ho * wo)
    grad_w = np.einsum("bkp,bqp->kq", g2, cols, optimize=True).reshape(weights.shape)
    grad_b = g2.sum(axis=(0, 2))
    grad_x = None
    if need_input_grad:
        dcols = np.matmul(weights.reshape(k_out, -1).T, g2)
        grad_x = kernels.col2im(dcols, b_, k_in, h, w, n, pad, stride)
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def maxpool2(x):
    xb, single = _batched(x)
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(xb))
    return (out[0], arg[0]) if single else (out, arg)


def _interp_matrix(n_in, n_out):
    """Row ``i`` holds align-corners=False bilinear weights for output ``i``."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def bilinear_upsample(m, target):
    """Resize an ``H' x W'`` map to ``target = (H, W)`` (align-corners=False)."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {m.shape}")
    h, w = target
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    if h < m.shape[0] or w < m.shape[1]:
        raise ValueError(f"target {target} is smaller than map {m.shape}")
    if (h, w) == m.shape:
        return m.copy()
    return _interp_matrix(m.shape[0], h) @ m @ _interp_matrix(m.shape[1], w).T


def gaussian_kernel1d(sigma):
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(m, sigma=1.0):
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, reflect padding."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = as_tensor(m)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got shape {m.shape}")
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    p = np.pad(m, ((r, r), (r, r)), mode="reflect")
    h, w = m.shape
    rows = np.zeros((h + 2 * r, w))
    for i, kv in enumerate(k):
        rows += kv * p[:, i:i + w]
    out = np.zeros((h, w))
    for i, kv in enumerate(k):
        out += kv * rows[i:i + h, :]
    return out


def frobenius_map(t):
    """Per-position L2 norm over the channel axis of a ``K x H x W`` tensor."""
    t = as_tensor(t)
    if t.ndim != 3:
        raise DimensionError(f"expected K x H x W, got shape {t.shape}")
    return np.sqrt(np.einsum("khw,khw->hw", t, t))
