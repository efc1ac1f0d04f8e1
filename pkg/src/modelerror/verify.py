"""Probabilistic forecast verification and climatology diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ckde import joint_pdf, normal_reference_bandwidths

LOG_SCORE_CAP = 30.0


def crps(ensemble_values, observation):
    """Continuous ranked probability score of an empirical forecast CDF.

    Exact closed form mean|x_i - y| - 0.5 * mean|x_i - x_j|, evaluated via
    the sorted-ensemble identity in O(n log n).
    """
    x = np.sort(np.asarray(ensemble_values, dtype=float))
    n = x.size
    if n < 1:
        raise ValueError("need at least one ensemble member")
    term_obs = np.abs(x - observation).mean()
    # sum_{i<j} (x_j - x_i) = sum_i (2i - n + 1) x_(i)  (0-based i)
    coeffs = 2.0 * np.arange(n) - n + 1
    term_pairs = (coeffs @ x) / n ** 2
    return float(term_obs - term_pairs)


def log_score(ensemble_values, observation, bandwidth_rule="normal_reference",
              cap=LOG_SCORE_CAP):
    """Negative log of a Gaussian-KDE forecast density at the observation.

    The density is floored at exp(-cap) so the score never exceeds ``cap``;
    an outcome far outside the ensemble otherwise yields infinity.
    """
    x = np.asarray(ensemble_values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two members for a density estimate")
    sigma = x.std(ddof=1)
    if sigma == 0.0:
        sigma = max(abs(x[0]), 1.0) * 1e-12
    if bandwidth_rule != "normal_reference":
        raise ValueError(f"unknown bandwidth rule {bandwidth_rule!r}")
    h = sigma * (4.0 / (3.0 * x.size)) ** 0.2
    z = (observation - x) / h
    dens = np.exp(-0.5 * z ** 2).mean() / (h * np.sqrt(2 * np.pi))
    dens = max(dens, np.exp(-cap))
    return float(-np.log(dens))


@dataclass(frozen=True)
class GridSpec:
    """Evaluation grid for sample-based divergences."""

    points_per_dim: int = 60
    quantile_lo: float = 0.005
    quantile_hi: float = 0.995
    floor: float = 1e-12


def kld(samples_p, samples_q, grid: GridSpec | None = None):
    """Kullback-Leibler divergence between two sample sets via joint KDEs.

    Both sets are density-estimated with product-Gaussian kernels and
    integrated on a regular grid covering the union of their central
    quantile envelopes; the second density is floored to keep the log
    finite.  Positive output means the first density puts mass where the
    second has little.
    """
    grid = grid or GridSpec()
    p_s = np.asarray(samples_p, dtype=float)
    q_s = np.asarray(samples_q, dtype=float)
    if p_s.ndim == 1:
        p_s = p_s[:, None]
    if q_s.ndim == 1:
        q_s = q_s[:, None]
    if p_s.shape[1] != q_s.shape[1]:
        raise ValueError("sample sets must share dimensionality")
    dim = p_s.shape[1]
    if dim > 3:
        raise ValueError("grid evaluation supports at most 3 dimensions")

    axes = []
    for j in range(dim):
        lo = min(np.quantile(p_s[:, j], grid.quantile_lo),
                 np.quantile(q_s[:, j], grid.quantile_lo))
        hi = max(np.quantile(p_s[:, j], grid.quantile_hi),
                 np.quantile(q_s[:, j], grid.quantile_hi))
        axes.append(np.linspace(lo, hi, grid.points_per_dim))
    mesh = np.meshgrid(*axes, indexing="ij")
    query = np.column_stack([m.ravel() for m in mesh])
    cell = np.prod([ax[1] - ax[0] for ax in axes])

    p_dens = joint_pdf(p_s, query)
    q_dens = np.maximum(joint_pdf(q_s, query), grid.floor)
    mask = p_dens > grid.floor
    return float(np.sum(p_dens[mask] * np.log(p_dens[mask] / q_dens[mask]))
                 * cell)


def skill_score(score_proposed, score_benchmark, score_perfect):
    """Relative improvement over a benchmark on a score scale.

    1 means matching the perfect score, 0 means no improvement over the
    benchmark, negative means degradation.  NaN marks the degenerate case
    where the benchmark already equals the perfect score.
    """
    denom = score_perfect - score_benchmark
    if denom == 0:
        return float("nan")
    return (score_proposed - score_benchmark) / denom


@dataclass
class SpreadErrorDiagnostic:
    rms_spread: np.ndarray  # per bin
    rms_error: np.ndarray
    counts: np.ndarray


def spread_error_bins(variances, squared_errors, n_bins=10):
    """Statistical-consistency diagnostic over equally populated variance bins.

    Records are sorted by forecast variance and split into ``n_bins`` bins of
    near-equal count; each bin reports the RMS spread and the RMS ensemble
    mean error.  Consistent forecasts put the points on the diagonal.
    """
    variances = np.asarray(variances, dtype=float)
    squared_errors = np.asarray(squared_errors, dtype=float)
    if variances.size != squared_errors.size:
        raise ValueError("inputs must be aligned")
    if variances.size < n_bins:
        raise ValueError(f"need at least {n_bins} records")
    order = np.argsort(variances, kind="stable")
    rms_spread = np.empty(n_bins)
    rms_error = np.empty(n_bins)
    counts = np.empty(n_bins, dtype=int)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        rms_spread[b] = np.sqrt(variances[chunk].mean())
        rms_error[b] = np.sqrt(squared_errors[chunk].mean())
        counts[b] = chunk.size
    return SpreadErrorDiagnostic(rms_spread, rms_error, counts)


@dataclass
class Climatology:
    lags: np.ndarray
    acf: np.ndarray
    ccf: np.ndarray          # against the right neighbour, same lags
    density_grid: np.ndarray
    density: np.ndarray


def _biased_xcorr(a, b, max_lag):
    n = a.size
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b)) / n
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = (a[: n - lag] @ b[lag:]) / n / denom
    return out


def climatology(series, max_lag, density_points=201):
    """ACF, neighbour CCF and marginal density of a slow-variable trajectory.

    ``series`` is (T,) or (T, n_x); correlations use biased (1/N)
    normalization and are averaged over grid points, the marginal density is
    a Gaussian KDE of the pooled values.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    n_t, n_x = series.shape
    if n_t < 10 ** 3:
        raise ValueError("series too short for stable climatology")
    if max_lag >= n_t:
        raise ValueError("max_lag must be below the series length")
    acf = np.zeros(max_lag + 1)
    ccf = np.zeros(max_lag + 1)
    for k in range(n_x):
        acf += _biased_xcorr(series[:, k], series[:, k], max_lag)
        ccf += _biased_xcorr(series[:, k], series[:, (k + 1) % n_x], max_lag)
    acf /= n_x
    ccf /= n_x

    pooled = series.ravel()
    h = float(normal_reference_bandwidths(pooled[:, None])[0])
    grid = np.linspace(pooled.min() - 3 * h, pooled.max() + 3 * h,
                       density_points)
    dens = joint_pdf(pooled, grid, bandwidths=[h])
    return Climatology(lags=np.arange(max_lag + 1), acf=acf, ccf=ccf,
                       density_grid=grid, density=dens)


def rmse(predicted, truth):
    """Root mean squared difference over all elements."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError("shapes must match")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


def ks_distance(samples_a, samples_b):
    """Two-sample Kolmogorov-Smirnov distance between empirical CDFs."""
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())
