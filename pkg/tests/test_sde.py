import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from crp_kit import sde
from crp_kit.sde import BbedParams, DomainError, OuTestParams, expint_ei

# Frozen from a 50-digit mpmath evaluation of the power series.
EI_1 = 1.8951178163559367555
EI_M1 = -0.21938393439552027368
# Frozen from scipy.integrate.quad (and cross-checked with mpmath.quad) of
# (1-t)^2 * int_0^t c^2 k^(2s) / (1-s)^2 ds at c=0.51, k=2.6.
SIGMA_SQ = {0.25: 0.0639508848056483, 0.5: 0.12092366142268948, 0.9: 0.10216073762282048}


def quad_sigma_sq(t, c=0.51, k=2.6):
    v, _ = quad(lambda s: c * c * k ** (2 * s) / (1 - s) ** 2, 0, t,
                epsabs=0, epsrel=1e-13, limit=200)
    return (1 - t) ** 2 * v


class TestDriftDiffusion:
    def test_drift_examples(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((2, 3, 4)) + 0j
        np.testing.assert_array_equal(sde.drift(x, y, 0.0), y - x)
        np.testing.assert_allclose(sde.drift(x, y, 0.5), 2 * (y - x))
        assert np.all(sde.drift(x, x, 0.7) == 0)

    def test_drift_domain(self):
        with pytest.raises(DomainError):
            sde.drift(np.zeros(2), np.ones(2), 1.0)

    def test_diffusion(self):
        assert sde.diffusion(0.0) == 0.51
        assert sde.diffusion(1.0) == pytest.approx(1.326, rel=1e-14)
        assert sde.diffusion(0.5) == pytest.approx(0.82235029032645206454, rel=1e-14)

    @pytest.mark.parametrize("kw", [dict(c=0), dict(k=-1), dict(t_eps=0.6),
                                    dict(T=1.0), dict(t_rsp=0.02)])
    def test_params_invalid(self, kw):
        with pytest.raises(DomainError):
            BbedParams(**kw)


class TestExpint:
    def test_values(self):
        assert expint_ei(1.0) == pytest.approx(EI_1, rel=1e-14)
        assert expint_ei(-1.0) == pytest.approx(EI_M1, rel=1e-14)

    def test_zero(self):
        with pytest.raises(DomainError):
            expint_ei(0.0)

    def test_small_argument(self):
        for x in (1e-6, 1e-9):
            assert expint_ei(x) - math.log(x) == pytest.approx(0.5772156649015329, abs=1e-5)

    def test_matches_scipy(self):
        from scipy.special import expi
        x = np.concatenate([np.linspace(-50, -0.01, 300), np.linspace(0.01, 60, 300)])
        np.testing.assert_allclose(expint_ei(x), expi(x), rtol=1e-11)

    def test_monotone_positive(self):
        x = np.linspace(0.01, 30, 2000)
        assert np.all(np.diff(expint_ei(x)) > 0)

    def test_vectorised_shape(self):
        assert expint_ei(np.ones((2, 3))).shape == (2, 3)


class TestKernel:
    def test_mean(self):
        rng = np.random.default_rng(1)
        x0, y = rng.standard_normal((2, 5, 3)) + 0j
        np.testing.assert_array_equal(sde.kernel_mean(x0, y, 0.0), x0)
        np.testing.assert_allclose(sde.kernel_mean(x0, y, 0.5), (x0 + y) / 2)
        np.testing.assert_allclose(sde.kernel_mean(x0, x0, 0.37), x0, atol=1e-15)

    def test_mean_linear_in_t(self):
        rng = np.random.default_rng(2)
        x0, y = rng.standard_normal((2, 4))
        m = [sde.kernel_mean(x0, y, t) for t in (0.2, 0.4, 0.6)]
        np.testing.assert_allclose(m[0] - 2 * m[1] + m[2], 0, atol=1e-15)

    def test_mean_shape_mismatch(self):
        with pytest.raises(ValueError):
            sde.kernel_mean(np.zeros(3), np.zeros(4), 0.5)

    def test_sigma_endpoints(self):
        assert sde.kernel_sigma_sq(0.0) == 0.0
        assert BbedParams().sigma(0.0) == 0.0
        assert sde.kernel_sigma_sq(1 - 1e-9) < 1e-8

    def test_sigma_domain(self):
        with pytest.raises(DomainError):
            sde.kernel_sigma_sq(1.0)

    @pytest.mark.parametrize("t", sorted(SIGMA_SQ))
    def test_sigma_frozen(self, t):
        assert sde.kernel_sigma_sq(t) == pytest.approx(SIGMA_SQ[t], rel=1e-10)

    def test_sigma_grid_vs_quadrature(self):
        for t in np.arange(0.05, 0.951, 0.05):
            assert sde.kernel_sigma_sq(t) == pytest.approx(quad_sigma_sq(t), rel=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(c=st.floats(0.1, 1.0), k=st.floats(1.5, 4.0), t=st.floats(0.01, 0.99))
    def test_sigma_property(self, c, k, t):
        p = BbedParams(c=c, k=k)
        assert p.kernel_sigma_sq(t) == pytest.approx(quad_sigma_sq(t, c, k), rel=1e-8)

    def test_single_peak(self):
        t = np.linspace(0, 0.999, 1000)
        s = BbedParams().kernel_sigma_sq(t)
        assert np.all(s >= 0)
        signs = np.sign(np.diff(s))
        assert np.count_nonzero(signs[1:] != signs[:-1]) == 1


class TestSampling:
    def test_forward_deterministic(self):
        x0 = np.zeros((2, 3, 4), complex)
        a = sde.sample_forward(x0, x0 + 1, np.array([0.3, 0.6]), np.random.default_rng(5))
        b = sde.sample_forward(x0, x0 + 1, np.array([0.3, 0.6]), np.random.default_rng(5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_forward_at_zero_is_mean(self):
        x0 = np.ones((3, 4)) * (1 + 2j)
        xt, _ = sde.sample_forward(x0, 0 * x0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(xt, x0)

    def test_forward_variance(self):
        p = BbedParams()
        x0 = np.zeros((10_000, 8), complex)
        y = np.ones_like(x0)
        xt, z = sde.sample_forward(x0, y, 0.5, np.random.default_rng(6), p)
        resid = xt - p.kernel_mean(x0, y, 0.5)
        var = np.mean(np.abs(resid) ** 2, axis=0)
        np.testing.assert_allclose(var, p.kernel_sigma_sq(0.5), rtol=0.05)
        np.testing.assert_allclose(resid, p.sigma(0.5) * z, atol=1e-15)

    def test_complex_normal_convention(self):
        z = sde.complex_normal(np.random.default_rng(7), (200_000,))
        assert np.var(z.real) == pytest.approx(0.5, rel=0.02)
        assert np.var(z.imag) == pytest.approx(0.5, rel=0.02)
        assert np.mean(np.abs(z) ** 2) == pytest.approx(1.0, rel=0.02)

    def test_prior(self):
        y = np.full((10_000, 4), 0.3 - 0.2j)
        x = sde.sample_prior(y, 0.5, BbedParams(), np.random.default_rng(8))
        se = BbedParams().sigma(0.5) * math.sqrt(0.5) / math.sqrt(len(y))
        assert np.all(np.abs(x.mean(axis=0).real - y[0].real) < 3 * se)
        assert np.all(np.abs(x.mean(axis=0).imag - y[0].imag) < 3 * se)
        again = sde.sample_prior(y, 0.5, BbedParams(), np.random.default_rng(8))
        np.testing.assert_array_equal(x, again)

    def test_prior_zero_sigma(self):
        class Zero(BbedParams):
            def sigma(self, t):
                return 0.0
        y = np.arange(6.0).reshape(2, 3) + 1j
        np.testing.assert_array_equal(sde.sample_prior(y, 0.5, Zero(), np.random.default_rng(0)), y)


class TestOu:
    def test_moments(self):
        p = OuTestParams(1.0, 1.0)
        assert sde.ou_moments(2.0, 0.0, p) == (2.0, 0.0)
        assert sde.ou_moments(2.0, math.inf, p) == (0.0, 0.5)
        m, v = sde.ou_moments(1.0, 1.0, p)
        assert m == pytest.approx(0.36787944117144233, rel=1e-15)
        assert v == pytest.approx(0.43233235838169365, rel=1e-15)

    def test_kernel_interface(self):
        p = OuTestParams(0.7, 1.3)
        m, v = sde.ou_moments(1.5, 0.4, p)
        assert p.kernel_mean(np.array([1.5]), None, 0.4)[0] == pytest.approx(m)
        assert p.kernel_sigma_sq(0.4) == pytest.approx(v)

    def test_invalid(self):
        with pytest.raises(DomainError):
            OuTestParams(theta=0.0)
