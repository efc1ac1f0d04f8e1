"""Multi-scale and single-scale Lorenz 96 dynamics with a fixed-step RK4 integrator.

The multi-scale system couples slow variables X_k on a latitude circle to a
ring of fast variables Z_{l,k}; the single-scale system is the same advection
/ damping / forcing dynamics for the slow variables alone and serves as the
imperfect forecast model.  Time is measured in model time units (MTU), with
1 MTU = 1/dt integration steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _HAVE_NUMBA = False


class IntegrationBlowupError(RuntimeError):
    """Trajectory left the finite range mid-integration."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(
            message or f"non-finite state detected at integration step {step_index}"
        )


@dataclass(frozen=True)
class L96Params:
    """Parameters of the coupled slow/fast system.

    xi is the time-scale separation between slow and fast variables, h_x and
    h_z the couplings onto the slow and fast tendencies, n_x and n_z the
    variable counts (n_z fast variables per slow grid point), and forcing the
    constant drive.
    """

    xi: float
    h_x: float
    h_z: float
    n_x: int
    n_z: int
    forcing: float

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError(f"xi must be positive, got {self.xi}")
        if self.n_x < 4:
            raise ValueError("n_x must be >= 4; the advection stencil needs "
                             "three distinct neighbours")
        if self.n_z < 4:
            raise ValueError("n_z must be >= 4")


@dataclass
class FullState:
    """Slow vector plus the fast-variable matrix.

    ``fast[l, k]`` is the l-th fast variable attached to slow grid point k;
    flattening column by column produces the single periodic ring on which
    the fast boundary condition Z_{l+n_z, k} = Z_{l, k+1} is a plain wrap.
    """

    slow: np.ndarray  # (n_x,)
    fast: np.ndarray  # (n_z, n_x)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.slow, self.fast.ravel(order="F")])

    @classmethod
    def unpack(cls, vec, n_x, n_z):
        vec = np.asarray(vec, dtype=float)
        slow = vec[:n_x].copy()
        fast = vec[n_x:].reshape((n_z, n_x), order="F").copy()
        return cls(slow=slow, fast=fast)

    def copy(self):
        return FullState(self.slow.copy(), self.fast.copy())


def tendency_single(x, forcing):
    """Single-scale tendency: advection, linear damping and constant forcing.

    Works on a vector (n_x,) or a batch (n_x, q); the grid axis is axis 0
    and wraps periodically.
    """
    x = np.asarray(x, dtype=float)
    xm1 = np.roll(x, 1, axis=0)
    xm2 = np.roll(x, 2, axis=0)
    xp1 = np.roll(x, -1, axis=0)
    return (xp1 - xm2) * xm1 - x + forcing


def tendency_multiscale(s: FullState, p: L96Params) -> FullState:
    """Coupled tendency of the slow and fast variables.

    The slow equation is the single-scale tendency plus the sub-grid coupling
    h_x * mean_l Z_{l,k}; the fast equation is the mirrored advection with
    damping and drive h_z * X_k, accelerated by 1/xi.  Both rings wrap
    periodically, with the fast ring continuing across slow grid points.
    """
    x, z = s.slow, s.fast
    if x.shape != (p.n_x,) or z.shape != (p.n_z, p.n_x):
        raise ValueError(
            f"state dims {x.shape}/{z.shape} do not match params "
            f"(n_x={p.n_x}, n_z={p.n_z})"
        )
    dx = tendency_single(x, p.forcing) + p.h_x * z.mean(axis=0)

    zf = z.ravel(order="F")
    zp1 = np.roll(zf, -1)
    zp2 = np.roll(zf, -2)
    zm1 = np.roll(zf, 1)
    dz = (zp1 * (zm1 - zp2) - zf + p.h_z * np.repeat(x, p.n_z)) / p.xi
    return FullState(slow=dx, fast=dz.reshape((p.n_z, p.n_x), order="F"))


def subgrid_tendency(s: FullState, p: L96Params) -> np.ndarray:
    """Coupling term the coarse model omits: h_x times the fast column mean."""
    if s.fast.shape != (p.n_z, p.n_x):
        raise ValueError("state dims do not match params")
    return p.h_x * s.fast.mean(axis=0)


def rk4_step(tendency, y, dt):
    """One classical fourth-order Runge-Kutta step."""
    k1 = tendency(y)
    k2 = tendency(y + 0.5 * dt * k1)
    k3 = tendency(y + 0.5 * dt * k2)
    k4 = tendency(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_integrate(tendency, s0, dt, n_steps):
    """Integrate ``ds/dt = tendency(s)`` with fixed-step RK4.

    Parameters
    ----------
    tendency : callable
        Maps a state array to its time derivative (same shape).
    s0 : array_like
        Initial state; any shape.
    dt : float
        Step size, must be positive.
    n_steps : int
        Number of steps, must be >= 1.

    Returns
    -------
    ndarray of shape (n_steps + 1, *s0.shape) starting at ``s0``.

    Raises
    ------
    IntegrationBlowupError
        If a non-finite value appears, carrying the offending step index.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    y = np.asarray(s0, dtype=float)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    for i in range(n_steps):
        y = rk4_step(tendency, y, dt)
        if not np.all(np.isfinite(y)):
            raise IntegrationBlowupError(i + 1)
        out[i + 1] = y
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _single_tendency_fill(x, forcing, out):
        n, q = x.shape
        for k in range(n):
            km1 = k - 1 if k >= 1 else n - 1
            km2 = k - 2 if k >= 2 else k - 2 + n
            kp1 = k + 1 if k < n - 1 else 0
            for c in range(q):
                out[k, c] = (x[kp1, c] - x[km2, c]) * x[km1, c] - x[k, c] + forcing

    @njit(cache=True)
    def _propagate_single_kernel(x0, forcing, dt, n_steps):
        n, q = x0.shape
        y = x0.copy()
        k1 = np.empty((n, q))
        k2 = np.empty((n, q))
        k3 = np.empty((n, q))
        k4 = np.empty((n, q))
        tmp = np.empty((n, q))
        for step in range(n_steps):
            _single_tendency_fill(y, forcing, k1)
            for k in range(n):
                for c in range(q):
                    tmp[k, c] = y[k, c] + 0.5 * dt * k1[k, c]
            _single_tendency_fill(tmp, forcing, k2)
            for k in range(n):
                for c in range(q):
                    tmp[k, c] = y[k, c] + 0.5 * dt * k2[k, c]
            _single_tendency_fill(tmp, forcing, k3)
            for k in range(n):
                for c in range(q):
                    tmp[k, c] = y[k, c] + dt * k3[k, c]
            _single_tendency_fill(tmp, forcing, k4)
            ok = True
            for k in range(n):
                for c in range(q):
                    y[k, c] += (dt / 6.0) * (
                        k1[k, c] + 2.0 * k2[k, c] + 2.0 * k3[k, c] + k4[k, c]
                    )
                    if not np.isfinite(y[k, c]):
                        ok = False
            if not ok:
                return y, step + 1
        return y, -1


if _HAVE_NUMBA:

    @njit(cache=True)
    def _multiscale_tendency_fill(v, nx, nz, xi, hx, hz, forcing, out):
        m = nx * nz
        for k in range(nx):
            km1 = k - 1 if k >= 1 else nx - 1
            km2 = k - 2 if k >= 2 else k - 2 + nx
            kp1 = k + 1 if k < nx - 1 else 0
            acc = 0.0
            for l in range(nz):
                acc += v[nx + k * nz + l]
            out[k] = ((v[kp1] - v[km2]) * v[km1] - v[k] + forcing
                      + hx * acc / nz)
        for i in range(m):
            ip1 = i + 1 if i < m - 1 else 0
            ip2 = i + 2
            if ip2 >= m:
                ip2 -= m
            im1 = i - 1 if i >= 1 else m - 1
            out[nx + i] = (v[nx + ip1] * (v[nx + im1] - v[nx + ip2])
                           - v[nx + i] + hz * v[i // nz]) / xi

    @njit(cache=True)
    def _multiscale_rk4_kernel(v0, nx, nz, xi, hx, hz, forcing, dt, n_steps):
        n = v0.shape[0]
        v = v0.copy()
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        tmp = np.empty(n)
        for step in range(n_steps):
            _multiscale_tendency_fill(v, nx, nz, xi, hx, hz, forcing, k1)
            for i in range(n):
                tmp[i] = v[i] + 0.5 * dt * k1[i]
            _multiscale_tendency_fill(tmp, nx, nz, xi, hx, hz, forcing, k2)
            for i in range(n):
                tmp[i] = v[i] + 0.5 * dt * k2[i]
            _multiscale_tendency_fill(tmp, nx, nz, xi, hx, hz, forcing, k3)
            for i in range(n):
                tmp[i] = v[i] + dt * k3[i]
            _multiscale_tendency_fill(tmp, nx, nz, xi, hx, hz, forcing, k4)
            ok = True
            for i in range(n):
                v[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if not np.isfinite(v[i]):
                    ok = False
            if not ok:
                return v, step + 1
        return v, -1


def _propagate_single_numpy(x, forcing, dt, n_steps):
    y = x
    for step in range(n_steps):
        k1 = tendency_single(y, forcing)
        k2 = tendency_single(y + 0.5 * dt * k1, forcing)
        k3 = tendency_single(y + 0.5 * dt * k2, forcing)
        k4 = tendency_single(y + dt * k3, forcing)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationBlowupError(step + 1)
    return y


def propagate_single(x, forcing, dt, n_steps):
    """Advance the single-scale model ``n_steps`` RK4 steps; returns the final state.

    Accepts a vector (n_x,) or a batch of column states (n_x, q) and
    propagates all columns together.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    xb = np.ascontiguousarray(x[:, None] if squeeze else x)
    if _HAVE_NUMBA:
        y, bad_step = _propagate_single_kernel(xb, float(forcing), float(dt),
                                               int(n_steps))
        if bad_step >= 0:
            raise IntegrationBlowupError(bad_step)
    else:
        y = _propagate_single_numpy(xb, forcing, dt, n_steps)
    return y[:, 0] if squeeze else y


@dataclass
class MultiscaleTrajectory:
    """Snapshots of a multi-scale integration at fixed step multiples."""

    times_mtu: np.ndarray        # (m + 1,)
    slow: np.ndarray             # (m + 1, n_x)
    fast: np.ndarray | None      # (m + 1, n_z, n_x) when kept
    final: FullState


def integrate_multiscale(s0: FullState, p: L96Params, dt, n_steps,
                         snapshot_every=1, keep_fast=False,
                         t0_mtu=0.0) -> MultiscaleTrajectory:
    """Integrate the coupled system, storing snapshots every ``snapshot_every`` steps.

    ``n_steps`` must be a multiple of ``snapshot_every``.  The fast variables
    are only stored when ``keep_fast`` is set; the final full state is always
    returned so a run can be continued.
    """
    if n_steps % snapshot_every != 0:
        raise ValueError("n_steps must be a multiple of snapshot_every")
    n_snap = n_steps // snapshot_every

    def packed_tendency(v):
        return tendency_multiscale(FullState.unpack(v, p.n_x, p.n_z), p).pack()

    v = s0.pack()
    times = t0_mtu + dt * snapshot_every * np.arange(n_snap + 1)
    slow = np.empty((n_snap + 1, p.n_x))
    fast = np.empty((n_snap + 1, p.n_z, p.n_x)) if keep_fast else None
    slow[0] = s0.slow
    if keep_fast:
        fast[0] = s0.fast
    for i in range(n_snap):
        if _HAVE_NUMBA:
            v, bad = _multiscale_rk4_kernel(
                v, p.n_x, p.n_z, float(p.xi), float(p.h_x), float(p.h_z),
                float(p.forcing), float(dt), int(snapshot_every))
            if bad >= 0:
                raise IntegrationBlowupError(i * snapshot_every + bad)
        else:
            for j in range(snapshot_every):
                v = rk4_step(packed_tendency, v, dt)
            if not np.all(np.isfinite(v)):
                raise IntegrationBlowupError((i + 1) * snapshot_every)
        slow[i + 1] = v[:p.n_x]
        if keep_fast:
            fast[i + 1] = v[p.n_x:].reshape((p.n_z, p.n_x), order="F")
    return MultiscaleTrajectory(times_mtu=times, slow=slow, fast=fast,
                                final=FullState.unpack(v, p.n_x, p.n_z))


def stable_substeps(p: L96Params, dt, target_fast_step=0.05):
    """Substep count keeping the fast subsystem's effective RK4 step below target.

    The fast variables evolve on the 1/xi-accelerated clock, so the nominal
    model step dt corresponds to dt/xi on that clock; a large separation can
    push a fixed step past the RK4 stability limit.  The returned count k
    means the truth should be integrated at dt/k.
    """
    return max(1, int(np.ceil(dt / (target_fast_step * p.xi))))


def true_additive_errors(truth, forcing, dt, steps_per_obs):
    """Per-interval additive errors of the coarse model against a truth sequence.

    ``truth`` is a sequence of states at consecutive observation times, either
    ``FullState`` objects or plain slow vectors.  For each consecutive pair
    the single-scale model is run from the earlier slow state over one
    observation interval and subtracted from the later slow state.

    Returns an array of shape ``(len(truth) - 1, n_x)``.
    """
    slow = np.asarray(
        [s.slow if isinstance(s, FullState) else np.asarray(s, float) for s in truth]
    )
    if slow.ndim != 2 or slow.shape[0] < 2:
        raise ValueError("truth must contain at least two states")
    starts = np.ascontiguousarray(slow[:-1].T)  # (n_x, m)
    predicted = propagate_single(starts, forcing, dt, steps_per_obs)
    return slow[1:] - predicted.T


def steps_per_mtu(dt):
    """Number of integration steps in one MTU; dt must divide 1 MTU evenly."""
    steps = 1.0 / dt
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ValueError(f"1 MTU is not an integer number of steps for dt={dt}")
    return int(round(steps))


def mtu_to_steps(mtu, dt):
    """Convert a duration in MTU to an integer step count."""
    steps = mtu / dt
    if abs(steps - round(steps)) > 1e-6 * max(1.0, abs(steps)):
        raise ValueError(f"{mtu} MTU is not an integer number of steps at dt={dt}")
    return int(round(steps))


def save_trajectory(path, times_mtu, slow, fast=None):
    """Write a slow trajectory as CSV ``t_mtu, x_1..x_Nx`` (10 significant digits).

    When fast snapshots are given, a companion ``<stem>_fast.csv`` holds the
    flattened fast ring per snapshot.
    """
    path = Path(path)
    slow = np.asarray(slow)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_mtu"] + [f"x_{k}" for k in range(1, slow.shape[1] + 1)])
        for t, row in zip(times_mtu, slow):
            writer.writerow([f"{t:.10g}"] + [f"{v:.10g}" for v in row])
    if fast is not None:
        fast = np.asarray(fast)
        m = fast.shape[1] * fast.shape[2]
        companion = path.with_name(path.stem + "_fast.csv")
        with open(companion, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_mtu"] + [f"z_{i}" for i in range(1, m + 1)])
            for t, snap in zip(times_mtu, fast):
                flat = snap.ravel(order="F")
                writer.writerow([f"{t:.10g}"] + [f"{v:.10g}" for v in flat])


def load_trajectory(path):
    """Read a trajectory CSV back into ``(times_mtu, slow)`` arrays."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    return data[:, 0], data[:, 1:]
