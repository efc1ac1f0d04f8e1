"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_single_tendency(x, forcing):
    """Index-by-index single-scale tendency, independent of the array code."""
    n = len(x)
    out = np.empty(n)
    for k in range(n):
        out[k] = (-x[(k - 1) % n] * (x[(k - 2) % n] - x[(k + 1) % n])
                  - x[k] + forcing)
    return out


def scalar_multiscale_tendency(slow, fast, p):
    """Index-by-index coupled tendency with explicit ring continuation."""
    nx, nz = p.n_x, p.n_z
    dx = np.empty(nx)
    dz = np.empty((nz, nx))
    for k in range(nx):
        dx[k] = (-slow[(k - 1) % nx] * (slow[(k - 2) % nx] - slow[(k + 1) % nx])
                 - slow[k] + p.forcing + p.h_x / nz * fast[:, k].sum())

    def zget(l, k):
        while l >= nz:
            l -= nz
            k += 1
        while l < 0:
            l += nz
            k -= 1
        return fast[l, k % nx]

    for k in range(nx):
        for l in range(nz):
            dz[l, k] = (-zget(l + 1, k) * (zget(l + 2, k) - zget(l - 1, k))
                        - fast[l, k] + p.h_z * slow[k]) / p.xi
    return dx, dz


def exact_kalman_cycle(m, p_cov, a, q, y, r_diag):
    """One forecast/analysis cycle of the exact linear-Gaussian filter."""
    m = a @ m
    p_cov = a @ p_cov @ a.T + q
    k = p_cov @ np.linalg.inv(p_cov + np.diag(r_diag))
    m = m + k @ (y - m)
    p_cov = (np.eye(m.size) - k) @ p_cov
    return m, p_cov


def crps_quadrature(ensemble_values, observation):
    """Integrate the squared CDF gap exactly over its piecewise-constant segments."""
    x = np.sort(np.asarray(ensemble_values, dtype=float))
    n = x.size
    breaks = np.unique(np.concatenate([x, [observation]]))
    total = 0.0
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        mid = 0.5 * (lo + hi)
        f_fc = np.searchsorted(x, mid, side="right") / n
        f_obs = 1.0 if mid >= observation else 0.0
        total += (f_fc - f_obs) ** 2 * (hi - lo)
    return total


def two_pass_variance(values):
    values = np.asarray(values, dtype=float)
    mean = values.mean()
    return ((values - mean) ** 2).sum() / (values.size - 1)
