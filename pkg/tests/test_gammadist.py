import math

import numpy as np
import pytest
from scipy import special, stats
from scipy.integrate import quad

from outagecast import gammadist as gd
from outagecast import numcore as nc
from outagecast.gammadist import GammaParams


class TestLogPdf:
    @pytest.mark.parametrize("d,k,theta,expected", [
        (2.0, 1.0, 2.0, -math.log(2.0) - 1.0),
        (1.0, 2.0, 1.0, -1.0),
        (4.0, 3.0, 2.0, -2.0),
    ])
    def test_examples(self, d, k, theta, expected):
        assert gd.log_pdf(d, GammaParams(k, theta)) == pytest.approx(expected, abs=1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k, theta, d = rng.uniform(0.2, 20), rng.uniform(0.1, 10), rng.uniform(0.01, 50)
            ref = stats.gamma.logpdf(d, k, scale=theta)
            assert gd.log_pdf(d, GammaParams(k, theta)) == pytest.approx(ref, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_non_positive_duration(self, d):
        with pytest.raises(gd.GammaParamError):
            gd.log_pdf(d, GammaParams(1.0, 1.0))

    @pytest.mark.parametrize("k,theta", [(0.0, 1.0), (1.0, -2.0), (math.nan, 1.0)])
    def test_invalid_params(self, k, theta):
        with pytest.raises(gd.GammaParamError):
            GammaParams(k, theta)


class TestNll:
    def test_unit_exponential(self):
        assert gd.nll(1.0, GammaParams(1.0, 1.0)) == pytest.approx(1.0, abs=1e-14)

    def test_exponential_scale_two(self):
        assert gd.nll(2.0, GammaParams(1.0, 2.0)) == pytest.approx(math.log(2.0) + 1.0, abs=1e-14)

    def test_theta_gradient_zero_at_exponential_mle(self):
        k, theta = nc.Value(1.0, requires_grad=True), nc.Value(1.0, requires_grad=True)
        nc.backward(gd.nll_node(1.0, k, theta))
        assert abs(float(theta.grad)) < 1e-15
        eps = 1e-6
        fd = (gd.nll(1.0, GammaParams(1.0, 1 + eps)) - gd.nll(1.0, GammaParams(1.0, 1 - eps))) / (2 * eps)
        assert abs(fd) < 1e-8

    def test_node_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d, k0, t0 = rng.uniform(0.1, 10), rng.uniform(0.3, 6), rng.uniform(0.3, 6)
            k, theta = nc.Value(k0, requires_grad=True), nc.Value(t0, requires_grad=True)
            nc.backward(gd.nll_node(d, k, theta))
            eps = 1e-6
            fk = (gd.nll(d, GammaParams(k0 + eps, t0)) - gd.nll(d, GammaParams(k0 - eps, t0))) / (2 * eps)
            ft = (gd.nll(d, GammaParams(k0, t0 + eps)) - gd.nll(d, GammaParams(k0, t0 - eps))) / (2 * eps)
            assert float(k.grad) == pytest.approx(fk, rel=1e-6, abs=1e-8)
            assert float(theta.grad) == pytest.approx(ft, rel=1e-6, abs=1e-8)

    @pytest.mark.parametrize("k", [0.5, 1.0, 2.0, 5.0])
    @pytest.mark.parametrize("d", [0.3, 2.0, 7.5])
    def test_theta_stationary_at_d_over_k(self, k, d):
        theta = nc.Value(d / k, requires_grad=True)
        nc.backward(gd.nll_node(d, nc.Value(k, requires_grad=True), theta))
        assert abs(float(theta.grad)) < 1e-10

    def test_short_duration_clamped_to_one_minute(self):
        p = GammaParams(2.0, 1.0)
        assert gd.nll(1e-9, p) == gd.nll(1.0 / 60.0, p)

    def test_vectorized_matches_scalar(self):
        d = np.array([0.5, 2.0, 9.0])
        k = np.array([0.7, 2.0, 4.0])
        th = np.array([1.5, 0.5, 3.0])
        out = gd.nll_array(d, k, th)
        for i in range(3):
            assert out[i] == pytest.approx(gd.nll(d[i], GammaParams(k[i], th[i])), abs=1e-12)


class TestMoments:
    def test_mean(self):
        assert gd.mean(GammaParams(2.0, 3.0)) == 6.0

    def test_mode_below_one(self):
        assert gd.mode(GammaParams(0.8, 5.0)) == 0.0

    def test_exponential_row(self):
        p = GammaParams(1.0, 2.0)
        assert gd.mode(p) == 0.0 and gd.mean(p) == 2.0


class TestSpecialFunctions:
    def test_lgamma_matches_scipy(self):
        x = np.concatenate([np.linspace(0.01, 5, 300), np.geomspace(5, 1e5, 100)])
        np.testing.assert_allclose(gd.lgamma(x), special.gammaln(x), rtol=1e-12, atol=1e-13)

    def test_digamma_matches_scipy(self):
        x = np.concatenate([np.linspace(0.01, 5, 300), np.geomspace(5, 1e5, 100)])
        np.testing.assert_allclose(gd.digamma(x), special.digamma(x), rtol=1e-12, atol=1e-13)
        for v in (0.05, 1.0, 3.7, 250.0):
            assert float(gd.digamma(v)) == pytest.approx(special.digamma(v), rel=1e-12)

    def test_trigamma_matches_scipy(self):
        x = np.linspace(0.05, 40, 200)
        np.testing.assert_allclose(gd.trigamma(x), special.polygamma(1, x), rtol=1e-10)

    def test_incomplete_gamma_matches_scipy(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            a, x = rng.uniform(0.1, 30), rng.uniform(0, 60)
            assert gd.gammainc_lower(a, x) == pytest.approx(special.gammainc(a, x), abs=1e-12)


class TestCdfQuantile:
    @pytest.mark.parametrize("k,theta,q,expected,tol", [
        (1.0, 1.0, 0.5, math.log(2.0), 1e-10),
        (1.0, 2.0, 0.8, -2.0 * math.log(0.2), 1e-10),
        (2.0, 1.0, 0.8, 2.994, 5e-4),
    ])
    def test_examples(self, k, theta, q, expected, tol):
        assert gd.quantile(q, GammaParams(k, theta)) == pytest.approx(expected, abs=tol)

    @pytest.mark.parametrize("k", [0.5, 1.0, 2.0, 5.0])
    @pytest.mark.parametrize("theta", [0.5, 2.0])
    @pytest.mark.parametrize("q", [0.1, 0.5, 0.8, 0.9])
    def test_round_trip_grid(self, k, theta, q):
        p = GammaParams(k, theta)
        x = gd.quantile(q, p)
        assert abs(gd.cdf(x, p) - q) < 1e-9
        assert gd.quantile(gd.cdf(x, p), p) == pytest.approx(x, abs=1e-6)
        assert x == pytest.approx(stats.gamma.ppf(q, k, scale=theta), rel=1e-8)

    @pytest.mark.parametrize("q", [0.0, 1.0, -0.1, 1.5])
    def test_level_outside_open_interval(self, q):
        with pytest.raises(gd.GammaParamError):
            gd.quantile(q, GammaParams(1.0, 1.0))

    def test_cdf_rejects_negative(self):
        with pytest.raises(gd.GammaParamError):
            gd.cdf(-1.0, GammaParams(1.0, 1.0))

    @pytest.mark.parametrize("k", [1.0, 2.0, 5.0])
    def test_pdf_integrates_to_one(self, k):
        p = GammaParams(k, 1.5)
        total, _ = quad(lambda x: gd.pdf(x, p), 0.0, k * 1.5 * 50, limit=200)
        assert abs(total - 1.0) < 1e-4


class TestSample:
    def test_mean_of_million_draws(self):
        x = gd.sample(GammaParams(2.0, 3.0), np.random.default_rng(0), size=1_000_000)
        assert 5.94 <= x.mean() <= 6.06

    def test_seeded_sequence_repeats(self):
        p = GammaParams(0.7, 2.0)
        a = gd.sample(p, np.random.default_rng(5), size=100)
        b = gd.sample(p, np.random.default_rng(5), size=100)
        np.testing.assert_array_equal(a, b)

    def test_exponential_matches_inverse_cdf(self):
        rng = np.random.default_rng(9)
        x = gd.sample(GammaParams(1.0, 2.0), rng, size=10_000)
        y = -2.0 * np.log(1.0 - rng.random(10_000))
        assert stats.ks_2samp(x, y).pvalue > 0.01

    def test_small_shape_boost(self):
        x = gd.sample(GammaParams(0.4, 1.0), np.random.default_rng(4), size=200_000)
        assert x.min() > 0
        assert x.mean() == pytest.approx(0.4, rel=0.02)
