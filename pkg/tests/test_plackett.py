#!/usr/bin/env python3
"""
Tests for the Plackett copula: CDF, conditional CDF, quantile and sampler.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from copulas import plackett
from copulas.plackett import CopulaParam
from core.exceptions import DomainError

theta_valid = st.floats(min_value=0.02, max_value=400.0, allow_nan=False, allow_infinity=False)
unit_interior = st.floats(min_value=1e-3, max_value=0.999, allow_nan=False)


class TestCopulaParam:
    """Parameter validation."""

    def test_rejects_non_positive(self):
        for bad in (0.0, -1.0, float("nan")):
            with pytest.raises(DomainError):
                CopulaParam(bad)

    def test_independence_flag(self):
        assert CopulaParam(1.0).is_independence
        assert not CopulaParam(3.0).is_independence

    def test_functions_accept_param_or_float(self):
        assert plackett.cdf(0.3, 0.6, CopulaParam(2.0)) == pytest.approx(plackett.cdf(0.3, 0.6, 2.0))


class TestCDF:
    """Values, boundary conditions and the independence limit."""

    def test_known_value(self):
        """C(0.5, 0.5; 3) = 1.5 / (3 + sqrt 3)."""
        assert plackett.cdf(0.5, 0.5, 3.0) == pytest.approx(0.316987, abs=1e-6)

    def test_independence(self):
        assert plackett.cdf(0.3, 0.7, 1.0) == pytest.approx(0.21, abs=1e-15)

    def test_continuous_through_theta_one(self):
        below = plackett.cdf(0.3, 0.7, 1.0 - 1e-9)
        above = plackett.cdf(0.3, 0.7, 1.0 + 1e-9)
        assert below == pytest.approx(0.21, abs=1e-9)
        assert above == pytest.approx(0.21, abs=1e-9)

    def test_boundaries(self):
        u = np.linspace(0.0, 1.0, 11)
        for theta in (0.1, 1.0, 3.0, 50.0):
            assert np.allclose(plackett.cdf(u, 0.0, theta), 0.0, atol=1e-15)
            assert np.allclose(plackett.cdf(u, 1.0, theta), u, atol=1e-12)
            assert np.allclose(plackett.cdf(1.0, u, theta), u, atol=1e-12)

    def test_fixed_theta_grid_against_direct_formula(self):
        """Rationalised form agrees with (A - S) / (2 (theta - 1)) away from theta = 1."""
        u, v = np.meshgrid(np.linspace(0.05, 0.95, 7), np.linspace(0.05, 0.95, 7))
        for theta in (0.2, 3.0, 9.0):
            a = 1.0 + (theta - 1.0) * (u + v)
            s = np.sqrt(a ** 2 - 4.0 * theta * (theta - 1.0) * u * v)
            direct = (a - s) / (2.0 * (theta - 1.0))
            assert np.allclose(plackett.cdf(u, v, theta), direct, atol=1e-12)

    def test_large_theta_near_upper_frechet(self):
        assert plackett.cdf(0.4, 0.6, 1e6) == pytest.approx(0.4, abs=1e-3)

    def test_rejects_outside_unit_square(self):
        with pytest.raises(DomainError):
            plackett.cdf(1.2, 0.5, 2.0)
        with pytest.raises(DomainError):
            plackett.cdf(0.5, float("nan"), 2.0)

    @given(theta=theta_valid, u=unit_interior, v=unit_interior)
    def test_bounds_and_symmetry(self, theta, u, v):
        c = plackett.cdf(u, v, theta)
        assert max(0.0, u + v - 1.0) - 1e-12 <= c <= min(u, v) + 1e-12
        assert c == pytest.approx(plackett.cdf(v, u, theta), rel=1e-12, abs=1e-15)

    @settings(max_examples=50)
    @given(theta=st.floats(min_value=0.05, max_value=100.0), u=st.floats(min_value=0.01, max_value=0.99),
           v=st.floats(min_value=0.01, max_value=0.99))
    def test_cross_ratio_recovers_theta(self, theta, u, v):
        assert plackett.cross_ratio(u, v, theta) == pytest.approx(theta, rel=1e-8)


class TestConditional:
    """Conditional CDF, density and inverse."""

    def test_conditional_matches_finite_difference(self):
        h = 1e-6
        for theta in (0.3, 3.0, 20.0):
            for u, v in ((0.2, 0.7), (0.5, 0.5), (0.9, 0.1)):
                fd = (plackett.cdf(u + h, v, theta) - plackett.cdf(u - h, v, theta)) / (2 * h)
                assert plackett.conditional_cdf_given_u(u, v, theta) == pytest.approx(fd, abs=1e-7)

    def test_conditional_at_independence(self):
        assert plackett.conditional_cdf_given_u(0.3, 0.65, 1.0) == pytest.approx(0.65, abs=1e-15)

    def test_density_matches_mixed_difference(self):
        h = 1e-4
        u, v, theta = 0.35, 0.6, 4.0
        mixed = (plackett.cdf(u + h, v + h, theta) - plackett.cdf(u + h, v - h, theta)
                 - plackett.cdf(u - h, v + h, theta) + plackett.cdf(u - h, v - h, theta)) / (4 * h * h)
        assert plackett.density(u, v, theta) == pytest.approx(mixed, rel=1e-5)

    @given(theta=theta_valid, u=unit_interior, p=unit_interior)
    def test_quantile_round_trip(self, theta, u, p):
        v = plackett.conditional_quantile_given_u(u, p, theta)
        assert 0.0 <= v <= 1.0
        assert plackett.conditional_cdf_given_u(u, v, theta) == pytest.approx(p, abs=1e-10)

    def test_quantile_extreme_theta(self):
        p = np.array([1e-6, 0.5, 1 - 1e-6])
        for theta in (1e-3, 1e3):
            v = plackett.conditional_quantile_given_u(0.5, p, theta)
            assert np.allclose(plackett.conditional_cdf_given_u(0.5, v, theta), p, atol=1e-10)

    def test_quantile_rejects_closed_endpoints(self):
        with pytest.raises(DomainError):
            plackett.conditional_quantile_given_u(0.0, 0.5, 2.0)
        with pytest.raises(DomainError):
            plackett.conditional_quantile_given_u(0.5, 1.0, 2.0)


class TestSampler:
    """Conditional-inversion sampling."""

    def test_identity_on_first_margin(self):
        v1 = np.array([0.1, 0.5, 0.9])
        u1, u2 = plackett.sample_pair(v1, np.array([0.3, 0.3, 0.3]), 5.0)
        assert np.array_equal(u1, v1)
        assert u2.shape == v1.shape

    def test_independence_returns_second_draw(self):
        u1, u2 = plackett.sample_pair(0.25, 0.75, 1.0)
        assert u1 == 0.25
        assert u2 == pytest.approx(0.75, abs=1e-15)

    def test_margins_uniform_and_quadrant_odds_ratio(self):
        """Large sample: uniform margins, empirical 2x2 odds ratio close to theta."""
        rng = np.random.default_rng(11)
        n, theta = 200_000, 4.0
        u1, u2 = plackett.sample_pair(rng.random(n), rng.random(n), theta)
        assert stats.kstest(u1, "uniform").pvalue > 0.01
        assert stats.kstest(u2, "uniform").pvalue > 0.01
        a = np.sum((u1 <= 0.5) & (u2 <= 0.5))
        b = np.sum((u1 <= 0.5) & (u2 > 0.5))
        c = np.sum((u1 > 0.5) & (u2 <= 0.5))
        d = np.sum((u1 > 0.5) & (u2 > 0.5))
        assert math.log(a * d / (b * c)) == pytest.approx(math.log(theta), abs=0.05)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
