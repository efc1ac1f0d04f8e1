"""Tests for the forecast verification metrics."""

import numpy as np
import pytest

from modelerror.verify import (GridSpec, climatology, crps, kld, ks_distance,
                               log_score, rmse, skill_score,
                               spread_error_bins)

from conftest import crps_quadrature


def crps_pairwise(values, observation):
    """Direct double-loop evaluation of the closed form."""
    x = np.asarray(values, dtype=float)
    n = x.size
    t1 = np.abs(x - observation).mean()
    t2 = np.abs(x[:, None] - x[None, :]).sum() / (2 * n ** 2)
    return t1 - t2


class TestCRPS:
    def test_single_perfect_member(self):
        assert crps([3.0], 3.0) == 0.0

    def test_single_member_absolute_error(self):
        assert crps([5.0], 3.0) == pytest.approx(2.0)

    def test_two_member_quadrature(self):
        value = crps([0.0, 2.0], 1.0)
        assert abs(value - crps_quadrature([0.0, 2.0], 1.0)) < 1e-6

    def test_matches_quadrature_and_pairwise(self, rng):
        for _ in range(100):
            n = rng.integers(1, 6)
            members = rng.standard_normal(n) * rng.uniform(0.5, 3)
            y = rng.standard_normal() * 2
            value = crps(members, y)
            assert abs(value - crps_quadrature(members, y)) <= 1e-6
            assert abs(value - crps_pairwise(members, y)) <= 1e-12

    def test_non_negative_and_zero_iff_perfect(self, rng):
        members = rng.standard_normal(7)
        assert crps(members, 0.3) > 0
        assert crps(np.full(7, 0.3), 0.3) == pytest.approx(0.0, abs=1e-15)


class TestLogScore:
    def test_mode_is_minimal(self, rng):
        members = np.concatenate([rng.standard_normal(2000),
                                  rng.standard_normal(2000)])
        grid = np.linspace(-3, 3, 13)
        scores = [log_score(members, y) for y in grid]
        assert np.argmin(np.abs(grid)) == np.argmin(scores)

    def test_standard_normal_value(self, rng):
        members = rng.standard_normal(10_000)
        score = log_score(members, 0.0)
        assert abs(score - 0.9189) < 0.05

    def test_far_outcome_hits_cap(self, rng):
        members = rng.standard_normal(50)
        score = log_score(members, 100.0)
        assert score == pytest.approx(30.0)
        assert np.isfinite(score)

    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            log_score([1.0], 0.0)


class TestKLD:
    def test_self_divergence_small(self, rng):
        samples = rng.standard_normal((3000, 1))
        assert kld(samples, samples) <= 0.02
        assert kld(samples, samples) >= -0.02

    def test_shifted_gaussians(self, rng):
        p = rng.standard_normal(5000)
        q = rng.standard_normal(5000) + 1.0
        value = kld(p, q)
        assert abs(value - 0.5) / 0.5 <= 0.25

    def test_asymmetry(self, rng):
        p = rng.standard_normal(3000)
        q = 0.5 * rng.standard_normal(3000) + 1.0
        assert kld(p, q) != kld(q, p)

    def test_two_dimensional(self, rng):
        p = rng.standard_normal((2000, 2))
        q = rng.standard_normal((2000, 2))
        assert abs(kld(p, q)) < 0.1

    def test_dimension_checks(self, rng):
        with pytest.raises(ValueError):
            kld(rng.standard_normal((10, 2)), rng.standard_normal((10, 3)))
        with pytest.raises(ValueError):
            kld(rng.standard_normal((10, 4)), rng.standard_normal((10, 4)))


class TestSkillScore:
    def test_anchor_points(self):
        assert skill_score(0.0, 0.6, 0.0) == pytest.approx(1.0)
        assert skill_score(0.6, 0.6, 0.0) == pytest.approx(0.0)
        assert skill_score(0.3, 0.6, 0.0) == pytest.approx(0.5)

    def test_degenerate_marker(self):
        assert np.isnan(skill_score(0.1, 0.5, 0.5))


class TestSpreadErrorBins:
    def test_consistent_forecasts_on_diagonal(self, rng):
        m = 10_000
        variances = rng.uniform(0.5, 4.0, m)
        errors = rng.standard_normal(m) * np.sqrt(variances)
        diag = spread_error_bins(variances, errors ** 2)
        rel = np.abs(diag.rms_error - diag.rms_spread) / diag.rms_spread
        assert rel.max() <= 0.15

    def test_constant_variance(self, rng):
        diag = spread_error_bins(np.full(100, 2.0),
                                 rng.standard_normal(100) ** 2)
        np.testing.assert_allclose(diag.rms_spread, np.sqrt(2.0))

    def test_bin_sizes_near_equal(self, rng):
        diag = spread_error_bins(rng.uniform(size=107),
                                 rng.uniform(size=107))
        assert diag.counts.max() - diag.counts.min() <= 1
        assert diag.counts.sum() == 107


class TestClimatology:
    def test_white_noise_acf(self, rng):
        series = rng.standard_normal((20_000, 2))
        clim = climatology(series, max_lag=20)
        assert clim.acf[0] == pytest.approx(1.0)
        assert np.abs(clim.acf[1:]).max() <= 3.0 / np.sqrt(20_000)

    def test_sine_periodicity(self):
        period = 50
        t = np.arange(5000)
        series = np.sin(2 * np.pi * t / period)
        clim = climatology(series, max_lag=60)
        assert clim.acf[period] >= 0.99

    def test_marginal_density_normalized(self, rng):
        series = rng.standard_normal((5000, 3))
        clim = climatology(series, max_lag=5)
        integral = np.trapezoid(clim.density, clim.density_grid)
        assert abs(integral - 1.0) < 1e-2

    def test_series_too_short(self, rng):
        with pytest.raises(ValueError):
            climatology(rng.standard_normal(100), max_lag=5)


class TestRMSE:
    def test_identity(self, rng):
        x = rng.standard_normal((10, 3))
        assert rmse(x, x) == 0.0

    def test_constant_offset(self, rng):
        x = rng.standard_normal((10, 3))
        assert rmse(x + 1.5, x) == pytest.approx(1.5)

    def test_matches_two_pass(self, rng):
        a = rng.standard_normal((20, 4))
        b = rng.standard_normal((20, 4))
        direct = np.sqrt(((a - b) ** 2).sum() / a.size)
        assert abs(rmse(a, b) - direct) < 1e-12


class TestKSDistance:
    def test_identical_samples(self, rng):
        x = rng.standard_normal(500)
        assert ks_distance(x, x) == 0.0

    def test_disjoint_supports(self):
        assert ks_distance([0.0, 1.0], [10.0, 11.0]) == 1.0

    def test_same_distribution_small(self, rng):
        a = rng.standard_normal(20_000)
        b = rng.standard_normal(20_000)
        assert ks_distance(a, b) < 0.02
