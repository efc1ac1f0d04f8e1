"""Tests for the partial observation operator and synthetic observations."""

import numpy as np
import pytest

from modelerror.observing import (ObservationOperator, lift_error,
                                  load_observations, observe,
                                  observe_complement, save_observations,
                                  split_error, synthesize_observations,
                                  to_records)

CASE1 = ObservationOperator((3, 4, 8, 9), 9)
CASE2 = ObservationOperator((1, 2, 5, 6), 9)


class TestOperator:
    def test_validation(self):
        with pytest.raises(ValueError):
            ObservationOperator((4, 3), 9)       # unsorted
        with pytest.raises(ValueError):
            ObservationOperator((3, 3, 4), 9)    # duplicate
        with pytest.raises(ValueError):
            ObservationOperator((0, 4), 9)       # out of range
        with pytest.raises(ValueError):
            ObservationOperator((3, 10), 9)

    def test_complement_is_ascending(self):
        assert CASE1.unobserved_indices == (1, 2, 5, 6, 7)
        assert CASE2.unobserved_indices == (3, 4, 7, 8, 9)

    def test_matrix_structure(self):
        h = CASE1.matrix()
        assert h.shape == (4, 9)
        np.testing.assert_allclose(h @ h.T, np.eye(4))
        assert h.sum() == 4
        stacked = np.vstack([h, CASE1.complement_matrix()])
        # stacking observed and complementary rows forms a permutation
        np.testing.assert_allclose(stacked @ stacked.T, np.eye(9))
        np.testing.assert_allclose(np.abs(stacked).sum(axis=0), 1.0)


class TestProjections:
    def test_case1_selection(self):
        x = np.arange(1.0, 10.0)
        np.testing.assert_allclose(observe(x, CASE1), [3, 4, 8, 9])

    def test_case2_selection(self):
        x = np.arange(1.0, 10.0)
        np.testing.assert_allclose(observe(x, CASE2), [1, 2, 5, 6])

    def test_permutation_identity(self, rng):
        x = rng.standard_normal(9)
        h = CASE1.matrix()
        hc = CASE1.complement_matrix()
        np.testing.assert_allclose(h.T @ (h @ x) + hc.T @ (hc @ x), x)

    def test_batched_axis0(self, rng):
        xb = rng.standard_normal((9, 3))
        np.testing.assert_allclose(observe(xb, CASE1), xb[CASE1.obs_ix])

    def test_dim_check(self):
        with pytest.raises(ValueError):
            observe(np.zeros(8), CASE1)


class TestLiftError:
    def test_zero(self):
        np.testing.assert_allclose(
            lift_error(np.zeros(4), np.zeros(5), CASE1), np.zeros(9))

    def test_round_trip(self, rng):
        eta = rng.standard_normal(9)
        eta_o, eta_u = split_error(eta, CASE1)
        np.testing.assert_allclose(lift_error(eta_o, eta_u, CASE1), eta)

    def test_case1_bookkeeping(self):
        out = lift_error(np.ones(4), np.full(5, 2.0), CASE1)
        expected = np.full(9, 2.0)
        expected[[2, 3, 7, 8]] = 1.0  # grid points 3, 4, 8, 9
        np.testing.assert_allclose(out, expected)

    def test_projections_recover_parts(self, rng):
        eta_o = rng.standard_normal(4)
        eta_u = rng.standard_normal(5)
        eta = lift_error(eta_o, eta_u, CASE1)
        np.testing.assert_allclose(observe(eta, CASE1), eta_o)
        np.testing.assert_allclose(observe_complement(eta, CASE1), eta_u)

    def test_dim_check(self):
        with pytest.raises(ValueError):
            lift_error(np.zeros(3), np.zeros(5), CASE1)


class TestSynthesizeObservations:
    def test_noise_scale(self, rng):
        truth = np.zeros((10_000, 9))
        y = synthesize_observations(truth, CASE1, 1e-6, rng)
        std = y.std()
        assert abs(std - 1e-3) / 1e-3 < 0.05

    def test_zero_noise_limit(self, rng):
        truth = rng.standard_normal((5, 9))
        y = synthesize_observations(truth, CASE1, 0.0, rng)
        np.testing.assert_allclose(y, truth[:, CASE1.obs_ix])

    def test_determinism(self):
        truth = np.arange(45.0).reshape(5, 9)
        y1 = synthesize_observations(truth, CASE1, 1e-4,
                                     np.random.default_rng(4))
        y2 = synthesize_observations(truth, CASE1, 1e-4,
                                     np.random.default_rng(4))
        np.testing.assert_array_equal(y1, y2)

    def test_noise_uncorrelated(self, rng):
        truth = np.zeros((20_000, 9))
        y = synthesize_observations(truth, CASE1, 1.0, rng)
        corr = np.corrcoef(y, rowvar=False)
        off_diag = corr[~np.eye(4, dtype=bool)]
        assert np.abs(off_diag).max() < 3.0 / np.sqrt(20_000) * 1.5
        lag1 = np.mean(y[:-1, 0] * y[1:, 0])
        assert abs(lag1) < 3.0 / np.sqrt(20_000)

    def test_negative_variance_rejected(self, rng):
        with pytest.raises(ValueError):
            synthesize_observations(np.zeros((2, 9)), CASE1, -1.0, rng)


class TestObservationCSV:
    def test_round_trip(self, tmp_path, rng):
        y = rng.standard_normal((6, 4))
        path = tmp_path / "obs.csv"
        save_observations(path, y, start_index=1)
        t, y2 = load_observations(path)
        np.testing.assert_array_equal(t, np.arange(1, 7))
        np.testing.assert_allclose(y2, y)
        header = path.read_text().splitlines()[0]
        assert header == "time_index,y_1,y_2,y_3,y_4"

    def test_records(self, rng):
        y = rng.standard_normal((3, 4))
        records = to_records(y, start_index=5)
        assert [r.time_index for r in records] == [5, 6, 7]
        np.testing.assert_allclose(records[1].y, y[1])
