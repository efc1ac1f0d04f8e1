"""Offline additive model-error estimation from partial, noisy observations.

Three sliding-window estimators produce per-interval error sequences over a
training period:

* ``estimate_errors_proposed`` frees only the unobserved error components and
  minimizes the binned, trapezoid-weighted total of within-bin sample
  variances of the error estimates, conditioned on previous-state covariates.
  Observed components are pinned so every predicted state matches its
  observation exactly.
* ``estimate_errors_b2`` is the long-window weak-constraint variational
  benchmark: all error components are free and the cost is the usual
  quadratic error-magnitude plus observation-misfit form.
* ``estimate_errors_sumsq`` keeps the exact-observation rollout but minimizes
  the plain sum of squared errors (an ablation of the conditional-variance
  cost).

A fourth benchmark, ``estimate_increment_stats_b1``, derives Gaussian error
statistics from the analysis increments of an inflated ETKF reanalysis.

All estimators advance one observation interval per window, re-optimizing the
overlapping tail, so the leading estimate of each window has already been
refined up to ``tau`` times when it is committed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import levmar
from .etkf import FilterNumericsError, run_filter, zero_errors
from .lorenz96 import IntegrationBlowupError
from .observing import ObservationOperator, lift_error

SPATIAL_COVARIATES = ("x_k", "x_km1")


# ---------------------------------------------------------------------------
# binning and the conditional-variance quadrature


@dataclass(frozen=True)
class BinPartition:
    """Quadrature grid for the conditional-variance cost.

    ``edges`` holds the grid points a_0..a_Nb per covariate dimension; each
    point owns the half-open neighbourhood reaching to the midpoints toward
    its neighbours, and samples beyond the outermost midpoints clamp to the
    edge neighbourhoods.  With ``edges=None`` the grid is recomputed from the
    sample range on every evaluation (``n_bins`` panels per dimension), which
    keeps the neighbourhoods populated as the optimizer moves the states.
    """

    n_bins: tuple
    edges: tuple | None = None

    @classmethod
    def adaptive(cls, *n_bins):
        if any(n < 1 for n in n_bins):
            raise ValueError("need at least one panel per dimension")
        return cls(n_bins=tuple(int(n) for n in n_bins), edges=None)

    @classmethod
    def fixed(cls, *edges):
        edges = tuple(np.asarray(e, dtype=float) for e in edges)
        for e in edges:
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("edges must be strictly increasing vectors")
        return cls(n_bins=tuple(e.size - 1 for e in edges), edges=edges)

    @property
    def dims(self):
        return len(self.n_bins)

    def resolve(self, covariates):
        """Concrete grid points for a (m, dims) covariate sample."""
        if self.edges is not None:
            return list(self.edges)
        covariates = np.atleast_2d(covariates)
        return [np.linspace(covariates[:, j].min(), covariates[:, j].max(),
                            self.n_bins[j] + 1)
                for j in range(self.dims)]


def _bin_index(samples, edges):
    """Neighbourhood index per sample; midpoints belong to the upper bin."""
    mids = 0.5 * (edges[:-1] + edges[1:])
    return np.searchsorted(mids, samples, side="right")


def _cell_index(covariates, edges_list):
    """Flattened product-cell index per sample plus the cell-grid shape."""
    covariates = np.atleast_2d(covariates)
    shape = tuple(e.size for e in edges_list)
    idx = np.zeros(covariates.shape[0], dtype=np.int64)
    for j, edges in enumerate(edges_list):
        idx = idx * shape[j] + _bin_index(covariates[:, j], edges)
    return idx, shape


def assign_bins(samples, part: BinPartition):
    """Index lists of the samples falling in each (product) neighbourhood.

    ``samples`` is (m,) for one covariate dimension or (m, d); cells are
    returned flattened in row-major order, so the 1-D case gives the lists
    v_0..v_Nb directly.  Every sample lands in exactly one cell.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[1] != part.dims:
        raise ValueError("sample dimensionality does not match the partition")
    idx, shape = _cell_index(samples, part.resolve(samples))
    n_cells = int(np.prod(shape))
    return [np.flatnonzero(idx == i) for i in range(n_cells)]


def bin_variance(eta_flat, v_i):
    """Unbiased sample variance of the members of one bin; 0 below 2 members."""
    v_i = np.asarray(v_i, dtype=int)
    if v_i.size < 2:
        return 0.0
    return float(np.var(np.asarray(eta_flat, dtype=float)[v_i], ddof=1))


def _trapezoid_weights(edges):
    d = np.diff(edges)
    w = np.zeros(edges.size)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def _cell_weights(edges_list):
    w = _trapezoid_weights(edges_list[0])
    for edges in edges_list[1:]:
        w = np.multiply.outer(w, _trapezoid_weights(edges))
    return w.ravel()


def _grouped_variance(eta, cells, n_cells):
    counts = np.bincount(cells, minlength=n_cells)
    sums = np.bincount(cells, weights=eta, minlength=n_cells)
    sqs = np.bincount(cells, weights=eta ** 2, minlength=n_cells)
    var = np.zeros(n_cells)
    ok = counts >= 2
    var[ok] = np.maximum(sqs[ok] - sums[ok] ** 2 / counts[ok], 0.0) \
        / (counts[ok] - 1)
    return counts, sums, var


# ---------------------------------------------------------------------------
# window problems and rollouts


@dataclass
class WindowProblem:
    """One sliding-window estimation problem.

    ``x_init`` is the committed state estimate one interval before the
    window; ``obs`` covers the window's tau+1 observation times in order.
    ``bin_covariates`` names the spatial covariates used for binning.
    """

    x_init: np.ndarray
    obs: np.ndarray
    h: ObservationOperator
    window: int
    bin_covariates: tuple = ("x_k",)

    def __post_init__(self):
        self.x_init = np.asarray(self.x_init, dtype=float)
        self.obs = np.atleast_2d(np.asarray(self.obs, dtype=float))
        if self.x_init.shape != (self.h.n_x,):
            raise ValueError("x_init does not match the observation operator")
        if self.obs.shape != (self.window + 1, self.h.n_y):
            raise ValueError(
                f"need {self.window + 1} observation rows of length "
                f"{self.h.n_y}, got {self.obs.shape}")
        for name in self.bin_covariates:
            if name not in SPATIAL_COVARIATES:
                raise ValueError(f"unknown binning covariate {name!r}")

    @property
    def n_x(self):
        return self.h.n_x

    @property
    def n_unobserved(self):
        return self.h.n_x - self.h.n_y

    @property
    def n_unknowns(self):
        """Free components when observed errors are pinned to observations."""
        return self.n_unobserved * (self.window + 1)

    @property
    def n_unknowns_full(self):
        """Free components when the whole error vector is optimized."""
        return self.n_x * (self.window + 1)


def _constrained_rollout(problem: WindowProblem, eta_u, model):
    """Window rollout with observed error components pinned to observations.

    ``eta_u`` is (tau+1, n_u, q); returns the full error estimates
    (tau+1, n_x, q) and the states entering each interval (tau+1, n_x, q).
    """
    steps = problem.window + 1
    q = eta_u.shape[2]
    obs_ix, unobs_ix = problem.h.obs_ix, problem.h.unobs_ix
    x = np.repeat(problem.x_init[:, None], q, axis=1)
    eta_out = np.empty((steps, problem.n_x, q))
    x_prev = np.empty((steps, problem.n_x, q))
    for l in range(steps):
        x_prev[l] = x
        mx = model(x)
        eta_l = np.empty((problem.n_x, q))
        eta_l[obs_ix] = problem.obs[l][:, None] - mx[obs_ix]
        eta_l[unobs_ix] = eta_u[l]
        eta_out[l] = eta_l
        x = mx + eta_l
    return eta_out, x_prev


def _free_rollout(problem: WindowProblem, eta, model):
    """Window rollout with the whole error vector free; returns the states."""
    steps = problem.window + 1
    q = eta.shape[2]
    x = np.repeat(problem.x_init[:, None], q, axis=1)
    states = np.empty((steps, problem.n_x, q))
    for l in range(steps):
        x = model(x) + eta[l]
        states[l] = x
    return states


def _spatial_covariates(x_prev, names):
    """Per-sample covariate matrix for a (steps, n_x, q) state stack.

    Samples flatten in (time, grid point) order per batch column; the
    neighbour covariate wraps periodically.
    """
    steps, n_x, q = x_prev.shape
    cols = []
    for name in names:
        if name == "x_k":
            cols.append(x_prev.reshape(steps * n_x, q))
        elif name == "x_km1":
            cols.append(np.roll(x_prev, 1, axis=1).reshape(steps * n_x, q))
        else:
            raise ValueError(f"unknown binning covariate {name!r}")
    return np.stack(cols, axis=1)  # (m, d, q)


# ---------------------------------------------------------------------------
# window costs


def conditional_variance_cost(problem: WindowProblem, eta_u, model,
                              part: BinPartition):
    """Binned total conditional variance of the window's error estimates.

    The rollout pins observed components to the observations; the flattened
    error samples are grouped by their previous-state covariates into the
    partition's neighbourhoods and the within-neighbourhood sample variances
    are combined with trapezoid quadrature weights.  Zero iff every populated
    neighbourhood has no internal spread (or fewer than two members).
    """
    steps = problem.window + 1
    eta_u = np.asarray(eta_u, dtype=float).reshape(steps,
                                                   problem.n_unobserved, 1)
    eta, x_prev = _constrained_rollout(problem, eta_u, model)
    cov = _spatial_covariates(x_prev, problem.bin_covariates)[:, :, 0]
    if part.dims != len(problem.bin_covariates):
        raise ValueError("partition dimensionality does not match the "
                         "binning covariates")
    edges = part.resolve(cov)
    cells, shape = _cell_index(cov, edges)
    _, _, var = _grouped_variance(eta[:, :, 0].ravel(), cells,
                                  int(np.prod(shape)))
    return float(_cell_weights(edges) @ var)


def cost_sum_squares(problem: WindowProblem, eta_u, model):
    """Unweighted squared norm of the window's error estimates.

    Shares the exact-observation rollout with the conditional-variance cost
    but ignores the state dependence entirely.
    """
    steps = problem.window + 1
    eta_u = np.asarray(eta_u, dtype=float).reshape(steps,
                                                   problem.n_unobserved, 1)
    eta, _ = _constrained_rollout(problem, eta_u, model)
    return float(np.sum(eta ** 2))


def cost_4dvar_b2(problem: WindowProblem, eta_full, model, q_inv, r_inv):
    """Weak-constraint variational window cost with all errors free.

    0.5 * sum eta_j' Qinv eta_j + 0.5 * sum (H x_j - y_j)' Rinv (H x_j - y_j)
    with the states rolled out from the committed initial estimate.
    """
    steps = problem.window + 1
    q_inv = np.asarray(q_inv, dtype=float)
    r_inv = np.asarray(r_inv, dtype=float)
    if r_inv.ndim == 1:
        r_inv = np.diag(r_inv)
    _check_spd(q_inv, "q_inv")
    _check_spd(r_inv, "r_inv")
    eta = np.asarray(eta_full, dtype=float).reshape(steps, problem.n_x, 1)
    states = _free_rollout(problem, eta, model)
    j_q = 0.5 * float(np.einsum("li,ij,lj->", eta[:, :, 0], q_inv,
                                eta[:, :, 0]))
    misfit = states[:, problem.h.obs_ix, 0] - problem.obs
    j_o = 0.5 * float(np.einsum("li,ij,lj->", misfit, r_inv, misfit))
    return j_q + j_o


def _check_spd(mat, name):
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} must be positive definite") from exc


def _inv_sqrt_spd(mat, name):
    mat = np.asarray(mat, dtype=float)
    _check_spd(mat, name)
    w, v = np.linalg.eigh(mat)
    return (v / np.sqrt(w)) @ v.T


# ---------------------------------------------------------------------------
# residual encodings for the least-squares optimizer


def _condvar_residual_factory(model, h, tau, part, bin_covariates):
    n_u = h.n_x - h.n_y
    m = (tau + 1) * h.n_x

    def make(x_init, y_win):
        problem = WindowProblem(x_init, y_win, h, tau,
                                bin_covariates=bin_covariates)

        def batch(cols):
            cols = np.atleast_2d(cols)
            q = cols.shape[1]
            eta_u = cols.reshape(tau + 1, n_u, q)
            try:
                eta, x_prev = _constrained_rollout(problem, eta_u, model)
            except IntegrationBlowupError:
                return np.full((m, q), np.nan)
            cov = _spatial_covariates(x_prev, bin_covariates)
            res = np.empty((m, q))
            for c in range(q):
                eta_c = eta[:, :, c].ravel()
                edges = part.resolve(cov[:, :, c])
                cells, shape = _cell_index(cov[:, :, c], edges)
                n_cells = int(np.prod(shape))
                counts, sums, _ = _grouped_variance(eta_c, cells, n_cells)
                weights = _cell_weights(edges)
                scale = np.zeros(n_cells)
                ok = counts >= 2
                scale[ok] = np.sqrt(weights[ok] / (counts[ok] - 1))
                means = np.zeros(n_cells)
                means[ok] = sums[ok] / counts[ok]
                res[:, c] = scale[cells] * (eta_c - means[cells])
            return res

        def single(vec):
            return batch(vec[:, None])[:, 0]

        return single, batch

    return make


def _sumsq_residual_factory(model, h, tau):
    n_u = h.n_x - h.n_y
    m = (tau + 1) * h.n_x

    def make(x_init, y_win):
        problem = WindowProblem(x_init, y_win, h, tau)

        def batch(cols):
            cols = np.atleast_2d(cols)
            q = cols.shape[1]
            eta_u = cols.reshape(tau + 1, n_u, q)
            try:
                eta, _ = _constrained_rollout(problem, eta_u, model)
            except IntegrationBlowupError:
                return np.full((m, q), np.nan)
            return eta.reshape(m, q)

        def single(vec):
            return batch(vec[:, None])[:, 0]

        return single, batch

    return make


def _b2_residual_factory(model, h, tau, lq, r_isqrt):
    n_x, n_y = h.n_x, h.n_y
    m = (tau + 1) * (n_x + n_y)

    def make(x_init, y_win):
        problem = WindowProblem(x_init, y_win, h, tau)

        def batch(cols):
            cols = np.atleast_2d(cols)
            q = cols.shape[1]
            eta = cols.reshape(tau + 1, n_x, q)
            try:
                states = _free_rollout(problem, eta, model)
            except IntegrationBlowupError:
                return np.full((m, q), np.nan)
            res = np.empty((tau + 1, n_x + n_y, q))
            for l in range(tau + 1):
                res[l, :n_x] = lq @ eta[l]
                res[l, n_x:] = r_isqrt[:, None] * (states[l][h.obs_ix]
                                                   - y_win[l][:, None])
            return res.reshape(m, q)

        def single(vec):
            return batch(vec[:, None])[:, 0]

        return single, batch

    return make


# ---------------------------------------------------------------------------
# the sliding-window driver and estimator front doors


@dataclass
class ErrorTrainingSet:
    """Per-interval error estimates paired with the states they start from.

    Row j holds the error over interval ``time_index[j]`` and the state
    estimate at the start of that interval.  Estimates from ``tail_start``
    on were committed from the final window without further re-optimization
    and are excluded from density training by default.
    """

    time_index: np.ndarray  # (T,)
    eta: np.ndarray         # (T, n_x)
    state_prev: np.ndarray  # (T, n_x)
    tail_start: int
    failures: tuple = ()

    @property
    def eta_flat(self):
        return self.eta.ravel()

    @property
    def state_prev_flat(self):
        return self.state_prev.ravel()

    def converged_only(self):
        keep = self.time_index < self.tail_start
        return ErrorTrainingSet(self.time_index[keep], self.eta[keep],
                                self.state_prev[keep], self.tail_start,
                                self.failures)

    def save(self, path):
        n_x = self.eta.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_index", "k", "eta", "x_prev_k",
                             "x_prev_km1", "eta_prev"])
            for j, t in enumerate(self.time_index):
                for k in range(n_x):
                    eta_prev = self.eta[j - 1, k] if j > 0 else np.nan
                    writer.writerow([
                        int(t), k + 1,
                        f"{self.eta[j, k]:.17g}",
                        f"{self.state_prev[j, k]:.17g}",
                        f"{self.state_prev[j, (k - 1) % n_x]:.17g}",
                        f"{eta_prev:.17g}",
                    ])

    @classmethod
    def load(cls, path, tail_start=None):
        data = np.atleast_2d(np.genfromtxt(path, delimiter=",",
                                           skip_header=1))
        times = np.unique(data[:, 0].astype(int))
        n_x = int(data[:, 1].max())
        eta = np.empty((times.size, n_x))
        state_prev = np.empty((times.size, n_x))
        pos = {t: i for i, t in enumerate(times)}
        for row in data:
            i, k = pos[int(row[0])], int(row[1]) - 1
            eta[i, k] = row[2]
            state_prev[i, k] = row[3]
        return cls(times, eta, state_prev,
                   tail_start=int(times.max()) + 1 if tail_start is None
                   else tail_start)


def training_set_from_truth(truth_slow, errors):
    """Wrap true per-interval errors and states as a training set."""
    truth_slow = np.asarray(truth_slow, dtype=float)
    errors = np.asarray(errors, dtype=float)
    t = errors.shape[0]
    if truth_slow.shape[0] != t + 1:
        raise ValueError("need one more state than error rows")
    return ErrorTrainingSet(np.arange(1, t + 1), errors, truth_slow[:-1],
                            tail_start=t + 1)


def _run_sliding_estimation(obs, x0, model, h, tau, lm_opts, factory,
                            commit, per_time_unknowns):
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    t_total = obs.shape[0]
    if t_total < tau + 1:
        raise ValueError("training period must cover at least one window")
    estimates = np.zeros((t_total, per_time_unknowns))
    x_hat = np.asarray(x0, dtype=float).copy()
    etas = np.empty((t_total, h.n_x))
    x_prevs = np.empty((t_total, h.n_x))
    failures = []

    for t in range(1, t_total - tau + 1):
        single, batch = factory(x_hat, obs[t - 1: t + tau])
        guess = estimates[t - 1: t + tau].ravel()
        result = levmar.minimize(single, guess, lm_opts,
                                 residual_batch_fn=batch)
        if np.isfinite(result.final_cost):
            estimates[t - 1: t + tau] = result.solution.reshape(
                tau + 1, per_time_unknowns)
        if result.reason in ("nonfinite_residual",
                             "singular_normal_equations"):
            failures.append(t)
        eta_t, x_next = commit(x_hat, obs[t - 1], estimates[t - 1])
        etas[t - 1] = eta_t
        x_prevs[t - 1] = x_hat
        x_hat = x_next

    # remaining estimates of the final window, committed without further
    # re-optimization
    for t in range(t_total - tau + 1, t_total + 1):
        eta_t, x_next = commit(x_hat, obs[t - 1], estimates[t - 1])
        etas[t - 1] = eta_t
        x_prevs[t - 1] = x_hat
        x_hat = x_next

    return ErrorTrainingSet(np.arange(1, t_total + 1), etas, x_prevs,
                            tail_start=t_total - tau + 1,
                            failures=tuple(failures))


def _constrained_commit(model, h):
    def commit(x_prev, y_t, eta_u_t):
        mx = model(x_prev)
        eta_o = y_t - mx[h.obs_ix]
        eta = lift_error(eta_o, eta_u_t, h)
        return eta, mx + eta

    return commit


def _free_commit(model):
    def commit(x_prev, y_t, eta_t):
        return eta_t, model(x_prev) + eta_t

    return commit


def estimate_errors_proposed(obs, x0, model, h: ObservationOperator,
                             part: BinPartition, tau, lm_opts=None,
                             bin_covariates=("x_k",)) -> ErrorTrainingSet:
    """Conditional-variance estimation of the full error sequence.

    Slides a window of ``tau + 1`` observation intervals over the training
    observations, minimizing the binned conditional variance over the
    unobserved error components; each step commits the leading estimate
    (whose observed part is pinned by the observation) and advances the state
    recursion.  The previous window's solution warm-starts the next.
    """
    factory = _condvar_residual_factory(model, h, tau, part, bin_covariates)
    return _run_sliding_estimation(
        obs, x0, model, h, tau, lm_opts or levmar.LMOptions(), factory,
        _constrained_commit(model, h), per_time_unknowns=h.n_x - h.n_y)


def estimate_errors_sumsq(obs, x0, model, h: ObservationOperator, tau,
                          lm_opts=None) -> ErrorTrainingSet:
    """Sum-of-squares ablation sharing the exact-observation rollout."""
    factory = _sumsq_residual_factory(model, h, tau)
    return _run_sliding_estimation(
        obs, x0, model, h, tau, lm_opts or levmar.LMOptions(), factory,
        _constrained_commit(model, h), per_time_unknowns=h.n_x - h.n_y)


def estimate_errors_b2(obs, x0, model, h: ObservationOperator, q, r_diag,
                       tau, lm_opts=None) -> ErrorTrainingSet:
    """Weak-constraint variational benchmark over the full error vector.

    ``q`` is the model error covariance (typically the sample covariance of
    known true errors, or a caller-supplied substitute); the observation
    precision comes from the diagonal ``r_diag``.
    """
    lq = _inv_sqrt_spd(np.asarray(q, dtype=float), "q")
    r_diag = np.broadcast_to(np.asarray(r_diag, dtype=float), (h.n_y,))
    if np.any(r_diag <= 0):
        raise ValueError("r_diag must be positive")
    factory = _b2_residual_factory(model, h, tau, lq, 1.0 / np.sqrt(r_diag))
    return _run_sliding_estimation(
        obs, x0, model, h, tau, lm_opts or levmar.LMOptions(), factory,
        _free_commit(model), per_time_unknowns=h.n_x)


# ---------------------------------------------------------------------------
# increment-statistics benchmark


@dataclass
class IncrementStats:
    """Gaussian error statistics from reanalysis increments.

    ``mean_b``/``cov_P`` are the mean and covariance of the per-cycle mean
    analysis increments; ``alpha`` scales the sampled perturbation and
    ``inflation`` records the reanalysis inflation factor that produced the
    statistics.
    """

    mean_b: np.ndarray
    cov_P: np.ndarray
    alpha: float
    inflation: float

    def __post_init__(self):
        self.mean_b = np.asarray(self.mean_b, dtype=float)
        self.cov_P = np.asarray(self.cov_P, dtype=float)
        if not np.allclose(self.cov_P, self.cov_P.T, atol=1e-10):
            raise ValueError("cov_P must be symmetric")

    def save(self, path):
        payload = {
            "mean": self.mean_b.tolist(),
            "covariance": self.cov_P.ravel().tolist(),  # row-major
            "alpha": self.alpha,
            "lambda": self.inflation,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            payload = json.load(fh)
        mean = np.asarray(payload["mean"], dtype=float)
        n = mean.size
        cov = np.asarray(payload["covariance"], dtype=float).reshape(n, n)
        return cls(mean, cov, float(payload["alpha"]),
                   float(payload["lambda"]))


def _psd_factor(cov):
    """Lower-triangular-ish factor L with L L^T = cov for PSD input."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    n = cov.shape[0]
    jitter = 1e-12 * np.trace(cov) / n
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        # exactly PSD-singular input: symmetric eigenfactor, clipping
        # round-off negatives
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def sample_error_b1(stats: IncrementStats, rng, size=None):
    """Additive forecast perturbation: -alpha * eta, eta ~ N(mean_b, cov_P)."""
    factor = _psd_factor(stats.cov_P)
    shape = (stats.mean_b.size,) if size is None else (stats.mean_b.size, size)
    z = rng.standard_normal(shape)
    draw = stats.mean_b.reshape(-1, *([1] * (len(shape) - 1))) + factor @ z
    return -stats.alpha * draw


class B1Sampler:
    """Per-cycle Gaussian error sampler for ensemble forecasting."""

    def __init__(self, stats: IncrementStats):
        self.stats = stats
        self._factor = _psd_factor(stats.cov_P)

    def __call__(self, x_prev, rng):
        n = x_prev.shape[1]
        z = rng.standard_normal((self.stats.mean_b.size, n))
        return -self.stats.alpha * (self.stats.mean_b[:, None]
                                    + self._factor @ z)


def estimate_increment_stats_b1(training_obs, model, e0,
                                h: ObservationOperator, lambda_grid,
                                alpha_grid, r_diag, rng) -> IncrementStats:
    """Increment statistics from an inflated ETKF reanalysis, with tuning.

    Runs one reanalysis per inflation candidate and keeps the one whose
    analysis mean best matches the assimilated observations (RMS over
    observed components); the mean and covariance of its per-cycle mean
    increments define the Gaussian error model.  The perturbation scale
    alpha is then chosen so the forecast spread matches the RMS forecast
    error against observations.  Candidates whose filter diverges are
    disqualified.
    """
    if len(lambda_grid) == 0 or len(alpha_grid) == 0:
        raise ValueError("tuning grids must be non-empty")
    y = np.atleast_2d(np.asarray(training_obs, dtype=float))
    best = None
    for lam in lambda_grid:
        try:
            run = run_filter(model, zero_errors, y, e0, h, r_diag,
                             inflation=lam)
        except FilterNumericsError:
            continue
        a_rms = np.sqrt(np.mean([
            (res.analysis.mean(axis=1)[h.obs_ix] - y[j]) ** 2
            for j, res in enumerate(run.results)]))
        if best is None or a_rms < best[0]:
            best = (a_rms, lam, run)
    if best is None:
        raise FilterNumericsError(
            "every inflation candidate diverged in the reanalysis")
    _, lam, run = best
    increments = np.stack([res.increment_mean for res in run.results])
    if increments.shape[0] < 2:
        raise ValueError("need at least two cycles to form increment statistics")
    mean_b = increments.mean(axis=0)
    cov_p = np.cov(increments, rowvar=False, ddof=1)

    best_alpha = None
    for alpha in alpha_grid:
        stats = IncrementStats(mean_b, cov_p, float(alpha), float(lam))
        sampler = B1Sampler(stats)
        try:
            run_a = run_filter(model, sampler, y, e0, h, r_diag, rng=rng)
        except FilterNumericsError:
            continue
        spread = np.mean([
            np.sqrt(res.forecast[h.obs_ix].var(axis=1, ddof=1).mean())
            for res in run_a.results])
        err = np.mean([
            np.sqrt(np.mean((res.forecast.mean(axis=1)[h.obs_ix] - y[j]) ** 2))
            for j, res in enumerate(run_a.results)])
        gap = abs(spread - err)
        if best_alpha is None or gap < best_alpha[0]:
            best_alpha = (gap, float(alpha))
    if best_alpha is None:
        raise FilterNumericsError(
            "every alpha candidate diverged in the tuning runs")
    return IncrementStats(mean_b, cov_p, best_alpha[1], float(lam))
