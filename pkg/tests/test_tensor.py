import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from qdk.errors import DomainError, ShapeError
from qdk.tensor import bmm, channel_view, channels_last, col2im, conv2d, im2col, matmul, percentile


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def direct_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    y[b, oc, i, j] = np.sum(patch * w[oc])
    return y


class TestPercentile:
    def test_constant(self):
        assert percentile([3.5] * 4, 95) == 3.5

    def test_one_to_hundred(self):
        vals = np.arange(1, 101)
        assert percentile(vals, 50) == pytest.approx(50.5, abs=1e-12)
        assert percentile(vals, 95) == pytest.approx(95.05, abs=1e-12)

    def test_interpolation_oracle(self, rng):
        v = rng.normal(size=37)
        eps = 73.0
        s = np.sort(v)
        idx = eps / 100 * (len(v) - 1)
        lo = int(np.floor(idx))
        expect = s[lo] + (idx - lo) * (s[lo + 1] - s[lo])
        assert percentile(v, eps) == pytest.approx(expect, rel=1e-13)

    @pytest.mark.parametrize("eps", [0, 100, -1, 101])
    def test_epsilon_domain(self, eps):
        with pytest.raises(DomainError):
            percentile([1.0, 2.0], eps)

    def test_empty(self):
        with pytest.raises(DomainError):
            percentile([], 50)

    @given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)),
           st.floats(0.5, 99.5), st.floats(0.5, 99.5), st.randoms(use_true_random=False))
    def test_monotone_bounded_permutation_invariant(self, v, e1, e2, r):
        lo, hi = sorted((e1, e2))
        p_lo, p_hi = percentile(v, lo), percentile(v, hi)
        assert p_lo <= p_hi + 1e-9
        assert v.min() <= p_lo and p_hi <= v.max()
        perm = list(v)
        r.shuffle(perm)
        assert percentile(perm, lo) == p_lo


class TestMatmul:
    def test_identity(self, rng):
        b = rng.normal(size=(3, 5))
        assert np.array_equal(matmul(np.eye(3), b), b)
        a = rng.normal(size=(4, 3))
        assert np.array_equal(matmul(a, np.eye(3)), a)

    def test_scalar(self):
        assert matmul(np.array([[2.0]]), np.array([[3.0]]))[0, 0] == 6.0

    def test_naive_oracle_bit_exact(self, rng):
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_naive_oracle_random_shapes(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_bmm(self, rng):
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 4, 5))
        out = bmm(a, b)
        for i in range(3):
            assert np.array_equal(out[i], naive_matmul(a[i], b[i]))


class TestConv:
    def test_pointwise_is_channel_matmul(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(5, 3, 1, 1))
        y = conv2d(x, w)
        ref = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
        np.testing.assert_allclose(y, ref, rtol=1e-13, atol=1e-13)

    def test_delta_kernel_identity(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = np.zeros((2, 2, 3, 3))
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        assert np.array_equal(conv2d(x, w, padding=1), x)

    def test_im2col_oracle_exact(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        y = conv2d(x, w)
        cols = im2col(x, 3, 3)
        ref = matmul(cols, w.reshape(3, -1).T).reshape(1, 3, 3, 3, order="C")
        # rows are (n, oh, ow), columns output channels
        ref = matmul(cols, w.reshape(3, -1).T).reshape(1, 3, 3, 3).transpose(0, 3, 1, 2)
        assert np.array_equal(y, ref)

    @given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 6),
           st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
    def test_direct_convolution_oracle(self, n, c, o, size, k, stride, pad, seed):
        r = np.random.default_rng(seed)
        k = min(k, size)
        x, w = r.normal(size=(n, c, size, size)), r.normal(size=(o, c, k, k))
        np.testing.assert_allclose(conv2d(x, w, stride, pad), direct_conv(x, w, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_col2im_is_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        cols = im2col(x, 3, 3, 2, 1)
        g = rng.normal(size=cols.shape)
        lhs = np.sum(cols * g)
        rhs = np.sum(x * col2im(g, x.shape, 3, 3, 2, 1))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_incompatible(self):
        with pytest.raises(ShapeError):
            conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))


def test_channel_view_and_layout(rng):
    t = rng.normal(size=(2, 3, 4))
    v = channel_view(t, 1, 2)
    assert np.array_equal(v, t[:, 2, :])
    assert not v.flags.writeable
    with pytest.raises(ShapeError):
        channel_view(t, 3, 0)
    with pytest.raises(ShapeError):
        channel_view(t, 1, 3)
    cl = channels_last(t, 1)
    assert cl.shape == (8, 3)
    assert np.array_equal(np.sort(cl[:, 1]), np.sort(t[:, 1, :].ravel()))
