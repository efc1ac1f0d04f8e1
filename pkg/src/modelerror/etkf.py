"""Ensemble Transform Kalman Filter: square-root analysis and cycling driver.

Ensembles are plain arrays with states in columns, shape (n_x, n).  The
analysis works entirely in ensemble space: the scaled observed deviation
matrix is decomposed with an SVD and the resulting transform is applied to
the forecast deviations, which keeps the update exact for any n_x and avoids
forming state-space covariances.  No localization is provided; the intended
regime is an ensemble large relative to the state dimension.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .lorenz96 import IntegrationBlowupError
from .observing import ObservationOperator, observe


class FilterNumericsError(RuntimeError):
    """SVD failure or blow-up inside the assimilation loop."""

    def __init__(self, message, cycle=None):
        self.cycle = cycle
        super().__init__(message if cycle is None
                         else f"cycle {cycle}: {message}")


@dataclass
class AnalysisResult:
    analysis: np.ndarray        # (n_x, n)
    forecast: np.ndarray        # (n_x, n)
    increment_mean: np.ndarray  # (n_x,) analysis mean minus forecast mean


def deviations(members):
    """Ensemble mean and the deviation matrix (rows sum to zero)."""
    members = np.asarray(members, dtype=float)
    if members.ndim != 2 or members.shape[1] < 2:
        raise ValueError("ensemble must be (n_x, n) with n >= 2")
    mean = members.mean(axis=1)
    return mean, members - mean[:, None]


def multiplicative_inflation(members, lam):
    """Scale deviations by sqrt(lam) about the unchanged mean."""
    if lam < 1.0:
        raise ValueError("inflation factor must be >= 1")
    mean, dev = deviations(members)
    return mean[:, None] + np.sqrt(lam) * dev


def etkf_analysis(forecast, y, h: ObservationOperator, r_diag) -> AnalysisResult:
    """One square-root analysis step.

    The transform T = U (I + S S^T)^{-1/2} U^T comes from the SVD
    U S V^T of W = (n-1)^{-1/2} (H X')^T R^{-1/2}; analysis deviations are
    X' T and the mean is updated through the same factors, so the analysis
    covariance matches the Kalman update of the sample covariance.
    """
    forecast = np.asarray(forecast, dtype=float)
    n = forecast.shape[1]
    r_diag = np.broadcast_to(np.asarray(r_diag, dtype=float), (h.n_y,))
    if np.any(r_diag <= 0):
        raise ValueError("observation error variances must be positive")
    y = np.asarray(y, dtype=float)

    mean, dev = deviations(forecast)
    r_isqrt = 1.0 / np.sqrt(r_diag)
    w = (dev[h.obs_ix, :].T * r_isqrt[None, :]) / np.sqrt(n - 1)  # (n, n_y)
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise FilterNumericsError(
            f"SVD of the scaled observed deviations failed "
            f"(|W|_max={np.abs(w).max():.3e})") from exc

    s_full = np.zeros(n)
    s_full[:s.size] = s
    t = (u * (1.0 / np.sqrt(1.0 + s_full ** 2))[None, :]) @ u.T
    dev_a = dev @ t

    innov = y - mean[h.obs_ix]
    gain_factor = s / (1.0 + s ** 2)  # (min(n, n_y),)
    r = s.size
    mean_a = mean + (dev @ (u[:, :r] * gain_factor[None, :])
                     @ (vt[:r, :] @ (innov * r_isqrt))) / np.sqrt(n - 1)

    analysis = mean_a[:, None] + dev_a
    return AnalysisResult(analysis=analysis, forecast=forecast,
                          increment_mean=mean_a - mean)


def zero_errors(x_prev, rng):
    """Error sampler that adds nothing (perfect-model forecasts)."""
    return np.zeros_like(x_prev)


@dataclass
class FilterRun:
    """Per-cycle analyses plus a diagnostics table.

    Diagnostic columns: cycle, forecast_rmse, analysis_rmse, mean_spread,
    innovation_norm.  The RMSE columns are NaN when no truth was supplied.
    """

    results: list[AnalysisResult]
    diagnostics: np.ndarray  # (cycles, 5)

    def save_diagnostics(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cycle", "forecast_rmse", "analysis_rmse",
                             "mean_spread", "innovation_norm"])
            for row in self.diagnostics:
                writer.writerow([int(row[0])] + [f"{v:.17g}" for v in row[1:]])


def _spread(members):
    return float(np.sqrt(members.var(axis=1, ddof=1).mean()))


def run_filter(propagate, sampler, observations, e0, h: ObservationOperator,
               r_diag, inflation=1.0, rng=None, truth=None) -> FilterRun:
    """Cycle the ETKF over a sequence of observations.

    Parameters
    ----------
    propagate : callable
        Advances a column batch of states over one observation interval.
    sampler : callable
        ``sampler(x_prev_members, rng) -> (n_x, n)`` additive error draws,
        one per member, conditioned on the pre-forecast states.
    observations : ndarray (T, n_y)
        One observation vector per cycle, in time order.
    e0 : ndarray (n_x, n)
        Initial (analysis) ensemble.
    inflation : float
        Multiplicative inflation applied to each forecast ensemble before
        the analysis; 1.0 disables it.
    truth : ndarray (T, n_x), optional
        States at observation times, only used for RMSE diagnostics.
    """
    members = np.array(e0, dtype=float)
    observations = np.atleast_2d(np.asarray(observations, dtype=float))
    n_cycles = observations.shape[0]
    results = []
    diag = np.full((n_cycles, 5), np.nan)
    for j in range(n_cycles):
        try:
            forecast = propagate(members) + sampler(members, rng)
            if inflation != 1.0:
                forecast = multiplicative_inflation(forecast, inflation)
            res = etkf_analysis(forecast, observations[j], h, r_diag)
        except IntegrationBlowupError as exc:
            raise FilterNumericsError(str(exc), cycle=j + 1) from exc
        except FilterNumericsError as exc:
            raise FilterNumericsError(str(exc), cycle=j + 1) from exc
        results.append(res)
        fmean, _ = deviations(res.forecast)
        amean, _ = deviations(res.analysis)
        diag[j, 0] = j + 1
        if truth is not None:
            diag[j, 1] = np.sqrt(np.mean((fmean - truth[j]) ** 2))
            diag[j, 2] = np.sqrt(np.mean((amean - truth[j]) ** 2))
        diag[j, 3] = _spread(res.forecast)
        diag[j, 4] = np.linalg.norm(observations[j] - observe(fmean, h))
        members = res.analysis
    return FilterRun(results=results, diagnostics=diag)
