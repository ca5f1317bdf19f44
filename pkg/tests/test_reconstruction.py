import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qdk.errors import DomainError, OptimizationError, ShapeError
from qdk.quant import QuantParams, fit_minmax
from qdk.reconstruction import (GAMMA, ZETA, KfacFactors, ReconstructionConfig, accumulate_kfac,
                                adaround_quantize, inverse_rectified_sigmoid, quadratic_loss,
                                reconstruct_layer, rectified_sigmoid, regularizer)


def random_psd(r, n):
    m = r.normal(size=(n, n + 2))
    return m @ m.T / n


def kron_loss(dW, G, A):
    v = dW.reshape(-1)       # row-major vec
    return float(v @ np.kron(G, A) @ v)


def exhaustive_min(W, f, p):
    s, zp = p.broadcast(2)
    base = np.floor(W / s)
    best = np.inf
    for bits in itertools.product((0.0, 1.0), repeat=W.size):
        h = np.array(bits).reshape(W.shape)
        Wq = s * (np.clip(base + h + zp, 0, p.qmax) - zp)
        best = min(best, kron_loss(W - Wq, f.G, f.A))
    return best


class TestKfac:
    def test_single_sample(self):
        f = accumulate_kfac(np.array([[1.0, 0.0]]), np.array([[2.0]]))
        assert np.array_equal(f.G, [[1.0, 0.0], [0.0, 0.0]])
        assert f.A[0, 0] == 4.0 and f.sample_count == 1

    @pytest.mark.parametrize("S", [1, 4, 9, 16])
    def test_sqrt_s_factor(self, S, rng):
        g = rng.normal(size=3)
        f = accumulate_kfac(np.tile(g, (S, 1)), np.ones((S, 2)), S)
        np.testing.assert_allclose(f.G, np.sqrt(S) * np.outer(g, g), rtol=1e-12)

    def test_symmetric_psd(self, rng):
        f = accumulate_kfac(rng.normal(size=(7, 5)), rng.normal(size=(7, 4)))
        for m in (f.G, f.A):
            assert np.array_equal(m, m.T)
            assert np.linalg.eigvalsh(m).min() >= -1e-10

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            accumulate_kfac(np.ones((3, 2)), np.ones((4, 2)))
        with pytest.raises(ShapeError):
            accumulate_kfac(np.ones((3, 2)), np.ones((3, 2)), S=2)
        with pytest.raises(ShapeError):
            accumulate_kfac(np.ones(3), np.ones((3, 2)))

    def test_damped(self):
        f = KfacFactors(np.diag([2.0, 4.0]), np.zeros((3, 3)))
        d = f.damped(0.5)
        assert np.array_equal(np.diag(d.G), [3.5, 5.5])
        assert np.array_equal(d.A, np.eye(3))


class TestQuadraticLoss:
    def test_zero(self, rng):
        f = KfacFactors(random_psd(rng, 3), random_psd(rng, 4))
        assert quadratic_loss(np.zeros((3, 4)), f) == 0.0

    def test_identity_is_frobenius(self, rng):
        dW = rng.normal(size=(3, 5))
        f = KfacFactors(np.eye(3), np.eye(5))
        assert quadratic_loss(dW, f) == pytest.approx(np.sum(dW**2), rel=1e-14)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_kronecker_oracle(self, o, i, seed):
        r = np.random.default_rng(seed)
        G, A, dW = random_psd(r, o), random_psd(r, i), r.normal(size=(o, i))
        ref = kron_loss(dW, G, A)
        assert abs(quadratic_loss(dW, KfacFactors(G, A)) - ref) <= 1e-10 * max(1.0, abs(ref))

    def test_shape(self):
        with pytest.raises(ShapeError):
            quadratic_loss(np.ones((2, 2)), KfacFactors(np.eye(3), np.eye(2)))


class TestRounding:
    def test_rectified_sigmoid_saturates(self):
        assert rectified_sigmoid(np.array([-20.0]))[0] == 0.0
        assert rectified_sigmoid(np.array([20.0]))[0] == 1.0
        assert (ZETA, GAMMA) == (1.1, -0.1)

    @given(st.floats(0.01, 0.99))
    def test_inverse(self, p):
        assert rectified_sigmoid(inverse_rectified_sigmoid(np.array([p])))[0] == pytest.approx(p, abs=1e-12)

    def test_floor_and_ceil_limits(self):
        w = np.array([0.7, 1.2, 2.9])
        s, zp = 0.5, 3
        floor = adaround_quantize(w, s, zp, 4, np.full(3, -50.0))
        ceil = adaround_quantize(w, s, zp, 4, np.full(3, 50.0))
        np.testing.assert_array_equal(floor, s * (np.floor(w / s) + zp - zp))
        np.testing.assert_array_equal(ceil, s * (np.floor(w / s) + 1 + zp - zp))

    def test_ceil_clipped(self):
        assert adaround_quantize(np.array([7.5]), 1.0, 0, 3, np.array([50.0]))[0] == 7.0

    def test_soft_value(self):
        v = inverse_rectified_sigmoid(np.array([0.7]))
        assert adaround_quantize(np.array([2.3]), 1.0, 0, 4, v)[0] == pytest.approx(2.7, abs=1e-12)

    def test_regularizer_examples(self):
        v = inverse_rectified_sigmoid
        assert regularizer(np.array([-50.0, 50.0, 50.0]), 2.0) == 0.0
        for beta in (2.0, 7.0, 20.0):
            assert regularizer(v(np.array([0.5])), beta) == pytest.approx(1.0)
        assert regularizer(v(np.array([0.75])), 2.0) == pytest.approx(0.75)
        with pytest.raises(DomainError):
            regularizer(np.zeros(1), 0.0)


class TestReconstructLayer:
    def test_identity_fisher_picks_nearest(self, rng):
        p = QuantParams(np.ones(3), np.full(3, 8.0), 4, 0)
        base = rng.integers(-5, 5, size=(3, 4)).astype(float)
        W = base + rng.uniform(0.05, 0.4, size=(3, 4))
        res = reconstruct_layer(W, KfacFactors(np.eye(3), np.eye(4)), ReconstructionConfig(iterations=300),
                                params=p)
        assert not res.rounding.any()
        assert np.array_equal(res.weights, base)
        assert res.loss == pytest.approx(exhaustive_min(W, KfacFactors(np.eye(3), np.eye(4)), p), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_exhaustive(self, seed):
        r = np.random.default_rng(100 + seed)
        o, i = int(r.integers(1, 4)), int(r.integers(1, 5))
        W = r.normal(size=(o, i))
        f = KfacFactors(random_psd(r, o), random_psd(r, i))
        res = reconstruct_layer(W, f, ReconstructionConfig(iterations=400))
        best = exhaustive_min(W, f, res.params)
        assert res.loss <= best + 1e-6
        assert res.loss <= res.rtn_loss + 1e-12

    def test_weights_on_grid_and_v_consistent(self, rng):
        W = rng.normal(size=(4, 6))
        f = KfacFactors(random_psd(rng, 4), random_psd(rng, 6))
        res = reconstruct_layer(W, f, ReconstructionConfig(iterations=200))
        s, zp = res.params.broadcast(2)
        codes = res.weights / s + zp
        np.testing.assert_allclose(codes, np.round(codes), atol=1e-9)
        assert np.array_equal(rectified_sigmoid(res.v) >= 0.5, res.rounding > 0)

    def test_trace_logging(self, rng):
        W = rng.normal(size=(2, 3))
        res = reconstruct_layer(W, KfacFactors(np.eye(2), np.eye(3)),
                                ReconstructionConfig(iterations=50, log_every=10))
        assert [t["step"] for t in res.trace] == [0, 10, 20, 30, 40, 49]

    def test_divergence_reports_step(self, rng):
        W = rng.normal(size=(2, 2))
        f = KfacFactors(np.full((2, 2), np.nan), np.eye(2))
        with pytest.raises(OptimizationError, match="step 0.*learning_rate"):
            reconstruct_layer(W, f, ReconstructionConfig(iterations=10), params=fit_minmax(W, 4, axis=0))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            ReconstructionConfig(iterations=0)
        with pytest.raises(DomainError):
            ReconstructionConfig(beta_start=1.0, beta_end=2.0)
        with pytest.raises(DomainError):
            ReconstructionConfig(warmup_fraction=1.0)

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            reconstruct_layer(np.ones(3), KfacFactors(np.eye(1), np.eye(3)))
        with pytest.raises(DomainError):
            reconstruct_layer(np.array([[np.inf]]), KfacFactors(np.eye(1), np.eye(1)))
