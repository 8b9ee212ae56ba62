import math

import numpy as np
import pytest

from snnreg.analysis import (
    OuParams,
    effective_jacobian,
    estimate_gate,
    gate_by_quadrature,
    gate_table,
    rate_slope,
    simulate_ou,
    stationary_rate,
    stationary_rate_mc,
    stationary_samples,
)
from snnreg.core import DimensionError, Surrogate


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2))


class TestOuSimulation:
    def test_noiseless_relaxation(self):
        p = OuParams(mu=0.5, tau=2.0, sigma=0.0, dt=0.05, horizon=400, burn_in=0)
        u = simulate_ou(p, 3, seed=0, u0=2.5)[0]
        k = np.arange(1, 401)
        np.testing.assert_allclose(u - 0.5, 2.0 * (1 - 0.05 / 2.0) ** k, rtol=1e-11)
        slope = np.polyfit(k * 0.05, np.log(u - 0.5), 1)[0]
        assert slope == pytest.approx(-1 / 2.0, rel=0.03)

    def test_stationary_moments(self):
        # 400 independent paths; path-level averages give honest standard errors
        p = OuParams(mu=0.3, tau=2.0, sigma=1.2, dt=0.02, horizon=3000, burn_in=500)
        u = simulate_ou(p, 400, seed=1)
        assert u.size == 10**6
        var = p.sigma**2 * p.tau / 2
        means = u.mean(axis=1)
        assert abs(means.mean() - p.mu) < 3 * means.std(ddof=1) / math.sqrt(400)
        sq = ((u - p.mu) ** 2).mean(axis=1)
        assert abs(sq.mean() - var) < 3 * sq.std(ddof=1) / math.sqrt(400)

    def test_deterministic(self):
        p = OuParams(horizon=200, burn_in=50)
        np.testing.assert_array_equal(simulate_ou(p, 5, 7), simulate_ou(p, 5, 7))

    @pytest.mark.parametrize("kw", [dict(dt=0.2), dict(tau=0.0), dict(sigma=-1.0), dict(burn_in=2000)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OuParams(**kw)


class TestRate:
    def test_at_mean(self):
        assert stationary_rate(OuParams(mu=0.7), 0.7) == 0.5

    def test_reference_tail(self):
        r = float(stationary_rate(OuParams(mu=0.0, tau=2.0, sigma=1.0), 1.0))
        assert r == pytest.approx(1 - _phi(1.0), abs=1e-15)
        assert abs(r - 0.158655) < 1e-6

    def test_strictly_decreasing(self):
        r = stationary_rate(OuParams(), np.linspace(-3, 3, 50))
        assert np.all(np.diff(r) < 0)

    def test_noiseless_indicator(self):
        p = OuParams(mu=0.2, sigma=0.0)
        np.testing.assert_array_equal(stationary_rate(p, np.array([-1.0, 0.2, 0.3])), [1.0, 1.0, 0.0])

    def test_monte_carlo_agrees(self):
        p = OuParams(mu=0.1, sigma=0.8)
        for theta in (-1.0, 0.5, 1.5):
            r, se = stationary_rate_mc(p, 10**5, seed=3, theta=theta)
            assert abs(r - float(stationary_rate(p, theta))) < 3 * se

    def test_stratified_samples_have_exact_law(self):
        p = OuParams(mu=-0.4, tau=3.0, sigma=0.5)
        s = stationary_samples(p, 16 * 4096, seed=2)
        assert s.shape == (16, 4096)
        assert s.mean() == pytest.approx(p.mu, abs=1e-3)
        assert s.std() == pytest.approx(p.stationary_std, rel=1e-2)


class TestGate:
    def test_narrow_surrogate_at_mean(self):
        g = estimate_gate(OuParams(mu=0.0, tau=2.0, sigma=1.0), Surrogate("sigmoid", 50.0), 10**5, seed=4, theta=0.0)
        assert abs(g.gate - 1 / math.sqrt(2 * math.pi)) < max(3 * g.stderr, 1e-3)

    def test_wide_rectangular_is_coverage_over_width(self):
        p = OuParams()
        w = 6.0
        kind = Surrogate("rectangular", w)
        for theta in (-1.0, 0.0, 2.0):
            exact = (_phi(theta + w / 2) - _phi(theta - w / 2)) / w
            quad = gate_by_quadrature(p, kind, theta, n=200_001)
            mc = estimate_gate(p, kind, 10**5, seed=5, theta=theta)
            assert quad == pytest.approx(exact, abs=1e-5)
            assert abs(mc.gate - exact) < 3 * mc.stderr + 1e-12
            # flattened compared with the density itself
            assert exact < math.exp(-theta**2 / 2) / math.sqrt(2 * math.pi) or abs(theta) > 1.5

    def test_gate_mass(self):
        p = OuParams()
        # atan has 1/x^2 tails, so the theta range must be wide
        thetas = np.linspace(-60, 60, 1201)
        for kind in (Surrogate("sigmoid", 5.0), Surrogate("atan", 2.0), Surrogate("rectangular", 1.0)):
            g = [gate_by_quadrature(p, kind, t, n=4001) for t in thetas]
            assert np.trapezoid(g, thetas) == pytest.approx(1.0, abs=1e-2)

    def test_vanishes_at_both_extremes_with_interior_peak(self):
        p = OuParams()
        kind = Surrogate("atan", 2.0)
        thetas = np.linspace(-8, 8, 33)
        w = np.random.default_rng(6).normal(size=(5, 5))
        norms = [effective_jacobian(np.full(5, gate_by_quadrature(p, kind, t)), w).spectral_norm for t in thetas]
        assert norms[0] < 0.05 * max(norms) and norms[-1] < 0.05 * max(norms)
        assert 0 < int(np.argmax(norms)) < len(thetas) - 1

    def test_minimum_samples(self):
        with pytest.raises(ValueError):
            estimate_gate(OuParams(), Surrogate("sigmoid", 50.0), 1000)

    def test_table_columns(self):
        p = OuParams()
        rows = gate_table(p, Surrogate("sigmoid", 50.0), [-1.0, 0.0, 1.0], 10**5, seed=7)
        assert [r[0] for r in rows] == [-1.0, 0.0, 1.0]
        for theta, r, slope, g, se in rows:
            assert r == pytest.approx(float(stationary_rate(p, theta)))
            assert slope == pytest.approx(float(rate_slope(p, theta)))
            assert se > 0


class TestJacobian:
    def test_dead_gate(self):
        w = np.random.default_rng(8).normal(size=(4, 3))
        s = effective_jacobian(np.zeros(4), w)
        assert np.all(s.matrix == 0) and s.spectral_norm == 0

    def test_identity_gate(self):
        w = np.random.default_rng(9).normal(size=(4, 3))
        np.testing.assert_array_equal(effective_jacobian(np.ones(4), w).matrix, w)

    def test_three_by_three_against_svd(self):
        w = np.random.default_rng(10).normal(size=(3, 3))
        s = effective_jacobian([2.0, 1.0, 0.0], w)
        np.testing.assert_array_equal(s.matrix, np.vstack([2 * w[0], w[1], 0 * w[2]]))
        ref = np.linalg.svd(s.matrix, compute_uv=False)[0]
        assert s.spectral_norm == pytest.approx(ref, rel=1e-6)

    def test_random_against_svd(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            w = rng.normal(size=(6, 4))
            s = effective_jacobian(rng.uniform(0, 2, 6), w)
            assert s.spectral_norm == pytest.approx(np.linalg.norm(s.matrix, 2), rel=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            effective_jacobian(np.ones(2), np.ones((3, 3)))
