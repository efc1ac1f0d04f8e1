"""Kernel conditional density estimation over (error, covariate) samples.

Gaussian product kernels throughout, so conditional densities are weighted
Gaussian mixtures and can be sampled exactly: pick a training sample with
probability proportional to its covariate-kernel weight, then jitter the
response by the response bandwidth.  Bandwidths default to the normal
reference rule in the joint (response + covariates) dimension; least-squares
cross-validation is available behind a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

_SQRT2PI = np.sqrt(2.0 * np.pi)

# Covariate columns that samplers know how to build; per-case configs pick a
# subset, e.g. ("x_k",) or ("x_k", "x_km1", "eta_prev").
COVARIATE_NAMES = ("x_k", "x_km1", "eta_prev")


class ConfigurationError(ValueError):
    pass


class TrainingSamples(NamedTuple):
    """Flattened per-grid-point samples: response eta and its covariates."""

    response: np.ndarray    # (m,)
    covariates: np.ndarray  # (m, d)
    names: tuple


def normal_reference_bandwidths(data):
    """Per-dimension normal-reference bandwidths for a joint KDE on (m, D) data."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    m, dim = data.shape
    sigma = data.std(axis=0, ddof=1)
    if np.any(sigma == 0):
        raise ConfigurationError("zero sample variance in a KDE dimension")
    return sigma * (4.0 / ((dim + 2) * m)) ** (1.0 / (dim + 4))


def lscv_bandwidths(data, multipliers=None):
    """Least-squares cross-validated scaling of the normal-reference bandwidths.

    Scores a grid of common multipliers on the reference bandwidths with the
    standard LSCV criterion (integrated squared density minus twice the
    leave-one-out likelihood term); O(m^2) per candidate.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    m, dim = data.shape
    base = normal_reference_bandwidths(data)
    if multipliers is None:
        multipliers = np.linspace(0.3, 2.0, 15)
    diff2 = np.zeros((m, m))
    scaled = data / base
    for j in range(dim):
        dj = scaled[:, j][:, None] - scaled[:, j][None, :]
        diff2 += dj ** 2
    best_score, best_mult = np.inf, 1.0
    for mult in multipliers:
        h = base * mult
        norm = 1.0 / np.prod(h * _SQRT2PI)
        # int f^2: pairwise kernels at bandwidth sqrt(2) h
        k2 = np.exp(-0.25 * diff2 / mult ** 2)
        int_f2 = norm * 2.0 ** (-dim / 2.0) * k2.sum() / m ** 2
        k1 = np.exp(-0.5 * diff2 / mult ** 2)
        np.fill_diagonal(k1, 0.0)
        loo = norm * k1.sum(axis=1) / (m - 1)
        score = int_f2 - 2.0 * loo.mean()
        if score < best_score:
            best_score, best_mult = score, mult
    return base * best_mult


@dataclass
class ConditionalKDE:
    """Gaussian-kernel mixture over (response, covariate) training samples."""

    response_samples: np.ndarray     # (m,)
    covariate_samples: np.ndarray    # (m, d)
    bandwidth_response: float
    bandwidth_covariates: np.ndarray  # (d,)
    rule: str = "normal_reference"
    covariate_names: tuple = ()

    def __post_init__(self):
        self.response_samples = np.asarray(self.response_samples, dtype=float)
        self.covariate_samples = np.atleast_2d(
            np.asarray(self.covariate_samples, dtype=float))
        self.bandwidth_covariates = np.asarray(self.bandwidth_covariates,
                                               dtype=float)
        if self.m < 10:
            raise ConfigurationError("need at least 10 training samples")
        bws = np.append(self.bandwidth_covariates, self.bandwidth_response)
        if not np.all(np.isfinite(bws)) or np.any(bws <= 0):
            raise ConfigurationError("bandwidths must be positive and finite")

    @property
    def m(self):
        return self.response_samples.size

    @property
    def d(self):
        return self.covariate_samples.shape[1]

    def to_json(self, path):
        payload = {
            "responses": self.response_samples.tolist(),
            "covariates": self.covariate_samples.tolist(),
            "bandwidths": [self.bandwidth_response]
            + self.bandwidth_covariates.tolist(),
            "rule": self.rule,
            "covariate_names": list(self.covariate_names),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        bws = payload["bandwidths"]
        return cls(
            response_samples=np.asarray(payload["responses"], dtype=float),
            covariate_samples=np.asarray(payload["covariates"], dtype=float),
            bandwidth_response=float(bws[0]),
            bandwidth_covariates=np.asarray(bws[1:], dtype=float),
            rule=payload.get("rule", "normal_reference"),
            covariate_names=tuple(payload.get("covariate_names", ())),
        )


def fit(responses, covariates, bandwidth_rule="normal_reference",
        covariate_names=()):
    """Fit a ConditionalKDE; bandwidths come from the joint (d+1)-dim rule."""
    responses = np.asarray(responses, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates[:, None]
    joint = np.column_stack([responses, covariates])
    if bandwidth_rule == "normal_reference":
        bws = normal_reference_bandwidths(joint)
    elif bandwidth_rule == "lscv":
        bws = lscv_bandwidths(joint)
    else:
        raise ConfigurationError(f"unknown bandwidth rule {bandwidth_rule!r}")
    return ConditionalKDE(
        response_samples=responses,
        covariate_samples=covariates,
        bandwidth_response=float(bws[0]),
        bandwidth_covariates=bws[1:],
        rule=bandwidth_rule,
        covariate_names=tuple(covariate_names),
    )


def _log_weights(model: ConditionalKDE, covariates):
    """Unnormalized log covariate-kernel weights, shape (q, m)."""
    c = np.atleast_2d(np.asarray(covariates, dtype=float))
    if c.shape[1] != model.d:
        raise ValueError(f"expected {model.d} covariates, got {c.shape[1]}")
    scaled_q = c / model.bandwidth_covariates
    scaled_s = model.covariate_samples / model.bandwidth_covariates
    logw = np.zeros((c.shape[0], model.m))
    for j in range(model.d):
        dj = scaled_q[:, j][:, None] - scaled_s[:, j][None, :]
        logw -= 0.5 * dj ** 2
    return logw


def _normalized_weights(model, covariates):
    logw = _log_weights(model, covariates)
    shift = logw.max(axis=1, keepdims=True)
    finite = np.isfinite(shift[:, 0])
    w = np.zeros_like(logw)
    if np.any(finite):
        w[finite] = np.exp(logw[finite] - shift[finite])
    if np.any(~finite):
        # all kernel weights underflow: fall back to the nearest training
        # sample in bandwidth-scaled covariate space
        nearest = np.argmax(logw[~finite], axis=1)
        w[np.flatnonzero(~finite), nearest] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def conditional_pdf(model: ConditionalKDE, response, covariates):
    """Mixture density of the response given one covariate point.

    ``response`` may be a scalar or a grid of evaluation points; the weights
    are computed once for the covariate point.
    """
    w = _normalized_weights(model, np.atleast_2d(covariates))[0]
    resp = np.asarray(response, dtype=float)
    h = model.bandwidth_response
    z = (resp[..., None] - model.response_samples) / h
    dens = (np.exp(-0.5 * z ** 2) / (h * _SQRT2PI)) @ w
    return float(dens) if np.isscalar(response) or resp.ndim == 0 else dens


def sample_conditional(model: ConditionalKDE, covariates, rng):
    """Draw one response from the conditional mixture at a covariate point."""
    return float(sample_conditional_many(model,
                                         np.atleast_2d(covariates), rng)[0])


def sample_conditional_many(model: ConditionalKDE, covariates, rng):
    """Vectorized conditional draws, one per covariate row."""
    c = np.atleast_2d(np.asarray(covariates, dtype=float))
    q = c.shape[0]
    u = rng.random(q)
    noise = rng.standard_normal(q)
    if _HAVE_NUMBA:
        scaled_q = np.ascontiguousarray(c / model.bandwidth_covariates)
        scaled_s = np.ascontiguousarray(
            model.covariate_samples / model.bandwidth_covariates)
        idx = _categorical_draw_kernel(scaled_q, scaled_s, u)
    else:
        w = _normalized_weights(model, c)
        cum = np.cumsum(w, axis=1)
        idx = np.minimum((cum < (u * cum[:, -1])[:, None]).sum(axis=1),
                         model.m - 1)
    return model.response_samples[idx] + model.bandwidth_response * noise


if _HAVE_NUMBA:

    @njit(cache=True)
    def _categorical_draw_kernel(scaled_q, scaled_s, u):
        q, d = scaled_q.shape
        m = scaled_s.shape[0]
        idx = np.empty(q, dtype=np.int64)
        logw = np.empty(m)
        for i in range(q):
            best, best_j = -np.inf, 0
            for j in range(m):
                acc = 0.0
                for l in range(d):
                    diff = scaled_q[i, l] - scaled_s[j, l]
                    acc -= 0.5 * diff * diff
                logw[j] = acc
                if acc > best:
                    best, best_j = acc, j
            total = 0.0
            for j in range(m):
                logw[j] = np.exp(logw[j] - best)
                total += logw[j]
            target = u[i] * total
            acc = 0.0
            pick = best_j
            for j in range(m):
                acc += logw[j]
                if acc >= target:
                    pick = j
                    break
            idx[i] = pick
        return idx


def joint_pdf(samples, query_points, bandwidths=None):
    """Product-Gaussian KDE density of ``samples`` at ``query_points``.

    Both arguments are (rows, dims); a 1-D input is treated as a single
    dimension.  Evaluation is chunked so large query grids stay in memory.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    query = np.asarray(query_points, dtype=float)
    if query.ndim == 1:
        query = query[:, None]
    m, dim = samples.shape
    if bandwidths is None:
        bandwidths = normal_reference_bandwidths(samples)
    bandwidths = np.asarray(bandwidths, dtype=float)
    norm = 1.0 / (m * np.prod(bandwidths * _SQRT2PI))
    scaled_s = samples / bandwidths
    scaled_q = query / bandwidths
    out = np.empty(query.shape[0])
    chunk = max(1, int(4e6) // max(m, 1))
    for start in range(0, query.shape[0], chunk):
        block = scaled_q[start:start + chunk]
        dist2 = np.zeros((block.shape[0], m))
        for j in range(dim):
            dj = block[:, j][:, None] - scaled_s[:, j][None, :]
            dist2 += dj ** 2
        out[start:start + chunk] = np.exp(-0.5 * dist2).sum(axis=1) * norm
    return out


def thin_decorrelated(training_set, interval_mtu, obs_interval_mtu,
                      covariates=("x_k",), include_tail=False):
    """Subsample an error training set to roughly independent samples.

    Keeps every (interval/obs interval)-th record and emits one sample per
    grid point per kept time; by spatial symmetry all grid points pool into
    the same sample set.  Covariates are built per configuration: the
    previous state at the same point, at the left neighbour, and/or the
    previous interval's error at the same point.
    """
    stride_f = interval_mtu / obs_interval_mtu
    stride = int(round(stride_f))
    if abs(stride_f - stride) > 1e-9 * max(1.0, stride_f) or stride < 1:
        raise ConfigurationError(
            "thinning interval must be an integer multiple of the "
            "observation interval")
    for name in covariates:
        if name not in COVARIATE_NAMES:
            raise ConfigurationError(f"unknown covariate {name!r}")

    times = np.asarray(training_set.time_index)
    eta = np.asarray(training_set.eta)
    state_prev = np.asarray(training_set.state_prev)
    n_x = eta.shape[1]
    cutoff = np.inf if include_tail else training_set.tail_start
    by_time = {int(t): i for i, t in enumerate(times)}

    responses, cov_rows = [], []
    need_prev = "eta_prev" in covariates
    for pos in range(stride - 1, times.size, stride):
        t = int(times[pos])
        if t >= cutoff:
            break
        if need_prev and (t - 1) not in by_time:
            continue
        prev_pos = by_time[t - 1] if need_prev else None
        for k in range(n_x):
            row = []
            for name in covariates:
                if name == "x_k":
                    row.append(state_prev[pos, k])
                elif name == "x_km1":
                    row.append(state_prev[pos, (k - 1) % n_x])
                else:
                    row.append(eta[prev_pos, k])
            responses.append(eta[pos, k])
            cov_rows.append(row)
    return TrainingSamples(
        response=np.asarray(responses, dtype=float),
        covariates=np.asarray(cov_rows, dtype=float).reshape(len(responses),
                                                             len(covariates)),
        names=tuple(covariates),
    )


class ConditionalErrorSampler:
    """Per-grid-point conditional error draws for ensemble forecasting.

    Builds one covariate row per (grid point, member) pair from the
    pre-forecast member states, draws from the fitted conditional mixture,
    and returns an additive error field shaped like the ensemble.  When the
    previous interval's error is a covariate, the sampler remembers its own
    draws per member (zero before the first call).
    """

    def __init__(self, model: ConditionalKDE, n_x, covariates=None):
        names = tuple(covariates or model.covariate_names or ("x_k",))
        for name in names:
            if name not in COVARIATE_NAMES:
                raise ConfigurationError(f"unknown covariate {name!r}")
        if len(names) != model.d:
            raise ConfigurationError(
                f"model expects {model.d} covariates, got {len(names)}")
        self.model = model
        self.n_x = n_x
        self.names = names
        self._prev_eta = None

    def reset(self):
        self._prev_eta = None

    def __call__(self, x_prev, rng):
        x_prev = np.asarray(x_prev, dtype=float)
        squeeze = x_prev.ndim == 1
        if squeeze:
            x_prev = x_prev[:, None]
        n = x_prev.shape[1]
        if self._prev_eta is None or self._prev_eta.shape != x_prev.shape:
            self._prev_eta = np.zeros_like(x_prev)
        cols = []
        for name in self.names:
            if name == "x_k":
                cols.append(x_prev.ravel())
            elif name == "x_km1":
                cols.append(np.roll(x_prev, 1, axis=0).ravel())
            else:
                cols.append(self._prev_eta.ravel())
        cov = np.column_stack(cols)
        draws = sample_conditional_many(self.model, cov, rng)
        draws = draws.reshape(self.n_x, n)
        if "eta_prev" in self.names:
            self._prev_eta = draws
        return draws[:, 0] if squeeze else draws


def remove_covariate_outliers(samples: TrainingSamples, quantile):
    """Drop samples with any covariate outside its central quantile range.

    The range is taken between order statistics (floor(quantile * m) cut per
    side, boundaries inclusive), so a vanishing quantile removes nothing and
    any quantile of at least 1/m removes a lone extreme point.
    """
    if not 0 < quantile < 0.5:
        raise ConfigurationError("quantile must lie in (0, 0.5)")
    cov = samples.covariates
    m = cov.shape[0]
    cut = int(np.floor(quantile * m))
    ordered = np.sort(cov, axis=0)
    lo = ordered[cut]
    hi = ordered[m - 1 - cut]
    keep = np.all((cov >= lo) & (cov <= hi), axis=1)
    return TrainingSamples(samples.response[keep], cov[keep], samples.names)
