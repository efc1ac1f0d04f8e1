"""Dense Levenberg-Marquardt nonlinear least squares over a residual function.

Cost is 0.5 * ||r(x)||^2.  The Jacobian is built by forward finite
differences; callers whose residuals are expensive can supply a batched
evaluator so all perturbed columns are computed in one call.  Damping uses
Marquardt's diagonal scaling, which behaves better than mu*I when the
unknowns have heterogeneous scales.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LMOptions:
    """Iteration controls.

    max_iterations bounds the total number of trial steps (accepted or
    rejected).  damping_up/down multiply the damping factor after a rejected
    or accepted step respectively.  fd_step scales the forward-difference
    perturbation, relative for |x| > 1.
    """

    max_iterations: int = 200
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    fd_step: float = 1e-6

    def __post_init__(self):
        if min(self.max_iterations, self.initial_damping, self.damping_up,
               self.damping_down, self.gradient_tol, self.step_tol,
               self.fd_step) <= 0:
            raise ValueError("all LM options must be positive")
        if not (self.damping_up > 1.0 > self.damping_down > 0.0):
            raise ValueError("need damping_up > 1 > damping_down > 0")


@dataclass
class LMResult:
    solution: np.ndarray
    final_cost: float
    iterations: int          # accepted steps
    converged: bool
    reason: str
    trace: list = field(default_factory=list)  # (iter, cost, damping, step_norm)


def _cost(r):
    return 0.5 * float(r @ r)


def finite_difference_jacobian(residual_fn, x, r0, fd_step, batch_fn=None):
    """Forward-difference Jacobian at x, given the residual r0 there.

    With ``batch_fn`` the perturbed points are evaluated in a single call on
    a (p, p) column matrix; otherwise one call per parameter.
    """
    p = x.size
    hs = fd_step * np.maximum(1.0, np.abs(x))
    if batch_fn is not None:
        xs = np.repeat(x[:, None], p, axis=1)
        xs[np.arange(p), np.arange(p)] += hs
        rs = np.asarray(batch_fn(xs))
        jac = (rs - r0[:, None]) / hs[None, :]
    else:
        jac = np.empty((r0.size, p))
        for i in range(p):
            xp = x.copy()
            xp[i] += hs[i]
            jac[:, i] = (residual_fn(xp) - r0) / hs[i]
    return jac


def minimize(residual_fn, x0, opts: LMOptions | None = None,
             residual_batch_fn=None) -> LMResult:
    """Minimize 0.5*||residual_fn(x)||^2 starting from x0.

    Each trial solves (J^T J + mu * diag(J^T J)) d = -J^T r; a cost decrease
    accepts the step and relaxes mu, otherwise mu is raised and the step is
    retried.  Stops on a small gradient, a small accepted step, or the trial
    budget.  Non-finite trial residuals are treated as rejected steps; a
    persistently singular system or persistently non-finite residuals abort
    with the best point found so far and ``converged=False``.
    """
    opts = opts or LMOptions()
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is non-finite at the initial point")
    cost = _cost(r)
    trace = [(0, cost, opts.initial_damping, 0.0)]

    def make_jacobian():
        jac = finite_difference_jacobian(residual_fn, x, r, opts.fd_step,
                                         residual_batch_fn)
        if not np.all(np.isfinite(jac)):
            return None, None
        return jac, jac.T @ r

    jac, grad = make_jacobian()
    if jac is None:
        return LMResult(x, cost, 0, False, "nonfinite_residual", trace)
    if cost == 0.0 or np.max(np.abs(grad)) <= opts.gradient_tol:
        return LMResult(x, cost, 0, True, "gradient_tol", trace)

    mu = opts.initial_damping
    accepted = 0
    bad_streak = 0
    reason = "max_iterations"
    converged = False

    for trial in range(1, opts.max_iterations + 1):
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        floor = 1e-12 * max(diag.max(), 1e-300)
        diag = np.maximum(diag, floor)
        try:
            step = np.linalg.solve(jtj + mu * np.diag(diag), -grad)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            mu *= opts.damping_up
            bad_streak += 1
            if bad_streak > 15:
                reason = "singular_normal_equations"
                break
            continue

        x_trial = x + step
        r_trial = np.asarray(residual_fn(x_trial), dtype=float)
        if not np.all(np.isfinite(r_trial)):
            mu *= opts.damping_up
            bad_streak += 1
            if bad_streak > 15:
                reason = "nonfinite_residual"
                break
            continue
        bad_streak = 0
        cost_trial = _cost(r_trial)

        if cost_trial < cost:
            x, r, cost = x_trial, r_trial, cost_trial
            accepted += 1
            mu = max(mu * opts.damping_down, 1e-15)
            step_norm = float(np.linalg.norm(step))
            trace.append((trial, cost, mu, step_norm))
            if step_norm <= opts.step_tol * (np.linalg.norm(x) + opts.step_tol):
                reason, converged = "step_tol", True
                break
            jac, grad = make_jacobian()
            if jac is None:
                reason = "nonfinite_residual"
                break
            if cost == 0.0 or np.max(np.abs(grad)) <= opts.gradient_tol:
                reason, converged = "gradient_tol", True
                break
        else:
            mu *= opts.damping_up
            if mu > 1e15:
                reason = "no_decrease"
                break

    return LMResult(x, cost, accepted, converged, reason, trace)


def save_trace(path, trace):
    """Write an iteration trace as CSV ``iter, cost, damping, step_norm``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "cost", "damping", "step_norm"])
        for it, cost, damping, step_norm in trace:
            writer.writerow([it, f"{cost:.17g}", f"{damping:.17g}",
                             f"{step_norm:.17g}"])
