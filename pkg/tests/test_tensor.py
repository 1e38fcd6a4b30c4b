import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from salforge.errors import DimensionError
from salforge.tensor import (
    bilinear_upsample,
    conv2d_backward,
    conv2d_forward,
    fold,
    frobenius_map,
    gaussian_kernel1d,
    gaussian_smooth,
    maxpool2,
    unfold,
)


def conv_loops(x, w, b, stride, pad):
    k, h, wd = x.shape
    ko, _, n, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - n) // stride + 1
    wo = (wd + 2 * pad - n) // stride + 1
    out = np.zeros((ko, ho, wo))
    for o in range(ko):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(k):
                    for a in range(n):
                        for bb in range(n):
                            s += w[o, c, a, bb] * xp[c, i * stride + a, j * stride + bb]
                out[o, i, j] = s + (0.0 if b is None else b[o])
    return out


def patches_loops(x, n):
    k, h, w = x.shape
    r = (n - 1) // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)))
    cols = np.zeros((n * n * k, h * w))
    for i in range(h):
        for j in range(w):
            cols[:, i * w + j] = xp[:, i:i + n, j:j + n].reshape(-1)
    return cols


# ---- conv2d_forward -----------------------------------------------------


def test_conv_scalar():
    out = conv2d_forward(np.full((1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 6.0


def test_conv_identity_1x1(rng):
    x = rng.standard_normal((1, 7, 5))
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 0)])
def test_conv_matches_loops(rng, stride, pad):
    x = rng.standard_normal((5, 8, 8))
    w = rng.standard_normal((4, 5, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d_forward(x, w, b, stride=stride, pad=pad)
    assert np.max(np.abs(out - conv_loops(x, w, b, stride, pad))) < 1e-12


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 6, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    out = conv2d_forward(x, w, None, pad=1)
    for i in range(3):
        assert np.array_equal(out[i], conv2d_forward(x[i], w, None, pad=1))


def test_conv_dimension_errors(rng):
    x = rng.standard_normal((3, 6, 6))
    with pytest.raises(DimensionError, match="axis 1"):
        conv2d_forward(x, rng.standard_normal((2, 4, 3, 3)))
    with pytest.raises(DimensionError):
        conv2d_forward(x, rng.standard_normal((2, 3, 3)))
    with pytest.raises(DimensionError):
        conv2d_forward(x, rng.standard_normal((2, 3, 3, 3)), bias=np.zeros(3))
    with pytest.raises(DimensionError):
        conv2d_forward(rng.standard_normal((6, 6)), rng.standard_normal((2, 3, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_forward(x, rng.standard_normal((2, 3, 3, 3)), pad=-1)
    with pytest.raises(ValueError):
        conv2d_forward(x, rng.standard_normal((2, 3, 3, 3)), stride=0)


# ---- conv2d_backward ----------------------------------------------------


def test_conv_backward_zero_upstream(rng):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    gx, gw, gb = conv2d_backward(x, w, np.zeros((3, 5, 5)), pad=1)
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_backward_finite_differences(rng, stride, pad):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    c = rng.standard_normal(conv2d_forward(x, w, b, stride, pad).shape)

    def loss(x_, w_, b_):
        return float((conv2d_forward(x_, w_, b_, stride, pad) * c).sum())

    gx, gw, gb = conv2d_backward(x, w, c, stride=stride, pad=pad)
    eps = 1e-5
    for arr, grad, which in ((x, gx, 0), (w, gw, 1), (b, gb, 2)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            args_p = [x.copy(), w.copy(), b.copy()]
            args_m = [x.copy(), w.copy(), b.copy()]
            args_p[which][idx] += eps
            args_m[which][idx] -= eps
            num[idx] = (loss(*args_p) - loss(*args_m)) / (2 * eps)
        rel = np.linalg.norm(num - grad) / max(np.linalg.norm(num), 1e-30)
        assert rel < 1e-6


def test_conv_backward_sum_loss_fd(rng):
    # scalar loss = sum of outputs
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((2, 1, 3, 3))
    _, gw, gb = conv2d_backward(x, w, np.ones((2, 4, 4)), pad=1)
    eps = 1e-5
    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        num[idx] = (conv2d_forward(x, wp, pad=1).sum() - conv2d_forward(x, wm, pad=1).sum()) / (2 * eps)
    assert np.linalg.norm(num - gw) / np.linalg.norm(num) < 1e-6
    assert np.allclose(gb, 16.0)


def test_weight_grad_is_outer_product_sum(rng):
    x = rng.standard_normal((3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    g = rng.standard_normal((4, 5, 5))
    _, gw, _ = conv2d_backward(x, w, g, pad=1)
    cols = unfold(x, 3)
    ref = np.zeros((4, 27))
    for u in range(25):
        ref += np.outer(g.reshape(4, -1)[:, u], cols[:, u])
    assert np.max(np.abs(gw.reshape(4, -1) - ref)) < 1e-12


def test_conv_backward_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        conv2d_backward(rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), np.zeros((3, 4, 4)), pad=1)


# ---- unfold / fold --------------------------------------------------------


def test_unfold_n1_is_reshape(rng):
    x = rng.standard_normal((3, 4, 5))
    assert np.array_equal(unfold(x, 1), x.reshape(3, -1))


def test_unfold_center_column():
    x = np.arange(9.0).reshape(1, 3, 3)
    assert np.array_equal(unfold(x, 3)[:, 4], x.reshape(-1))


def test_unfold_matches_loops(rng):
    x = rng.standard_normal((4, 6, 6))
    assert np.array_equal(unfold(x, 3), patches_loops(x, 3))
    assert np.array_equal(unfold(x, 5), patches_loops(x, 5))


def test_unfold_errors(rng):
    x = rng.standard_normal((1, 4, 4))
    with pytest.raises(ValueError):
        unfold(x, 2)
    with pytest.raises(ValueError):
        unfold(x, 3, pad=0)


def test_fold_unfold_coverage(rng):
    x = rng.standard_normal((2, 5, 6))
    counts = fold(unfold(np.ones_like(x), 3), x.shape, 3)
    assert np.allclose(fold(unfold(x, 3), x.shape, 3), x * counts, atol=1e-12)
    assert counts[0, 0, 0] == 4 and counts[0, 2, 2] == 9


# ---- bilinear_upsample --------------------------------------------------


def reference_bilinear(m, h, w):
    hi, wi = m.shape
    out = np.zeros((h, w))
    for i in range(h):
        sy = min(max((i + 0.5) * hi / h - 0.5, 0), hi - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, hi - 1)
        fy = sy - y0
        for j in range(w):
            sx = min(max((j + 0.5) * wi / w - 0.5, 0), wi - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, wi - 1)
            fx = sx - x0
            top = (1 - fx) * m[y0, x0] + fx * m[y0, x1]
            bot = (1 - fx) * m[y1, x0] + fx * m[y1, x1]
            out[i, j] = (1 - fy) * top + fy * bot
    return out


def test_upsample_constant():
    out = bilinear_upsample(np.full((3, 5), 5.0), (17, 11))
    assert np.allclose(out, 5.0, atol=1e-12, rtol=0)


def test_upsample_single_pixel():
    assert np.array_equal(bilinear_upsample(np.array([[0.25]]), (6, 4)), np.full((6, 4), 0.25))


def test_upsample_2x2_reference():
    m = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = bilinear_upsample(m, (4, 4))
    assert np.max(np.abs(out - reference_bilinear(m, 4, 4))) < 1e-12
    # hand values: first row is 0, .25, .75, 1
    assert np.allclose(out[0], [0, 0.25, 0.75, 1.0])


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10, allow_nan=False)),
       st.integers(0, 10), st.integers(0, 10))
@settings(max_examples=60, deadline=None)
def test_upsample_bounds_and_reference(m, dh, dw):
    h, w = m.shape[0] + dh, m.shape[1] + dw
    out = bilinear_upsample(m, (h, w))
    assert out.min() >= m.min() - 1e-12 and out.max() <= m.max() + 1e-12
    assert np.max(np.abs(out - reference_bilinear(m, h, w))) < 1e-12


def test_upsample_errors():
    with pytest.raises(ValueError):
        bilinear_upsample(np.ones((2, 2)), (0, 4))
    with pytest.raises(ValueError):
        bilinear_upsample(np.ones((4, 4)), (2, 8))


# ---- gaussian_smooth ----------------------------------------------------


def test_smooth_constant():
    m = np.full((9, 12), 0.3)
    assert np.allclose(gaussian_smooth(m, 1.0), m, atol=1e-15, rtol=0)


def test_smooth_impulse_argmax_and_kernel():
    m = np.zeros((21, 21))
    m[10, 10] = 1.0
    out = gaussian_smooth(m, 1.0)
    assert np.unravel_index(out.argmax(), out.shape) == (10, 10)
    r = 3
    t = np.arange(-r, r + 1)
    k = np.exp(-0.5 * t ** 2)
    k /= k.sum()
    ref = np.zeros_like(m)
    ref[10 - r:10 + r + 1, 10 - r:10 + r + 1] = np.outer(k, k)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_kernel_radius():
    assert len(gaussian_kernel1d(1.0)) == 7
    assert len(gaussian_kernel1d(1.2)) == 9
    assert abs(gaussian_kernel1d(2.5).sum() - 1.0) < 1e-15


def test_smooth_linear(rng):
    a, b = rng.standard_normal((2, 10, 13))
    lhs = gaussian_smooth(2.5 * a - 0.7 * b, 1.0)
    rhs = 2.5 * gaussian_smooth(a, 1.0) - 0.7 * gaussian_smooth(b, 1.0)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_smooth_reflect_padding():
    # reflect (not edge) padding: value at the border sees its mirror neighbours
    m = np.zeros((8, 8))
    m[0, 1] = 1.0
    k = gaussian_kernel1d(1.0)
    out = gaussian_smooth(m, 1.0)
    # column 1 sees itself directly and again through column -1, its mirror
    assert abs(out[0, 1] - k[3] * (k[3] + k[1])) < 1e-15
    # column 0 is fed by column 1 directly and by its reflection at column -1 -> column 1 again
    assert abs(out[0, 0] - 2 * k[2] * k[3]) < 1e-15


def test_smooth_errors():
    with pytest.raises(ValueError):
        gaussian_smooth(np.ones((4, 4)), 0.0)
    with pytest.raises(ValueError):
        gaussian_smooth(np.ones((4, 4)), -1.0)


# ---- frobenius_map / maxpool ------------------------------------------


def test_frobenius_cases(rng):
    assert not frobenius_map(np.zeros((3, 4, 4))).any()
    t = rng.standard_normal((1, 4, 5))
    assert np.array_equal(frobenius_map(t), np.abs(t[0]))
    t = rng.standard_normal((8, 4, 4))
    ref = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            ref[i, j] = np.sqrt(sum(t[k, i, j] ** 2 for k in range(8)))
    assert np.max(np.abs(frobenius_map(t) - ref)) < 1e-12


def test_frobenius_zero_iff_zero_vector(rng):
    t = rng.standard_normal((3, 5, 5))
    t[:, 1, 2] = 0
    t[:, 4, 0] = 0
    t[0, 3, 3] = 0  # partially zero, still non-zero vector
    m = frobenius_map(t)
    zeros = set(zip(*np.nonzero(m == 0)))
    assert zeros == {(1, 2), (4, 0)}


def test_maxpool_first_max():
    x = np.array([[[1.0, 3.0], [3.0, 0.0]]])
    out, arg = maxpool2(x)
    assert out[0, 0, 0] == 3.0 and arg[0, 0, 0] == 1


def test_finite_outputs(rng):
    x = rng.standard_normal((2, 8, 8)) * 1e3
    w = rng.standard_normal((3, 2, 3, 3))
    for out in (conv2d_forward(x, w, pad=1), gaussian_smooth(x[0]), bilinear_upsample(x[0], (16, 16)),
                frobenius_map(x)):
        assert np.isfinite(out).all()
