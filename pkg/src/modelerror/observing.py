"""Partial observation of the slow variables and synthetic observation generation.

Grid points are numbered 1..n_x as in the model equations; the operator keeps
that convention in its public fields and exposes zero-based index arrays for
array work.  Stacking the observed-selection rows on top of the complementary
rows forms a permutation, so any state splits losslessly into an observed and
an unobserved part.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class ObservationOperator:
    """Selection of observed slow-variable grid points (1-based, sorted)."""

    observed_indices: tuple[int, ...]
    n_x: int

    def __post_init__(self):
        idx = tuple(int(k) for k in self.observed_indices)
        if list(idx) != sorted(set(idx)):
            raise ValueError("observed_indices must be sorted and distinct")
        if not idx:
            raise ValueError("at least one observed index is required")
        if idx[0] < 1 or idx[-1] > self.n_x:
            raise ValueError(f"observed indices must lie in [1, {self.n_x}]")
        object.__setattr__(self, "observed_indices", idx)

    @property
    def n_y(self) -> int:
        return len(self.observed_indices)

    @property
    def unobserved_indices(self) -> tuple[int, ...]:
        observed = set(self.observed_indices)
        return tuple(k for k in range(1, self.n_x + 1) if k not in observed)

    @property
    def obs_ix(self) -> np.ndarray:
        return np.asarray(self.observed_indices, dtype=int) - 1

    @property
    def unobs_ix(self) -> np.ndarray:
        return np.asarray(self.unobserved_indices, dtype=int) - 1

    def matrix(self) -> np.ndarray:
        h = np.zeros((self.n_y, self.n_x))
        h[np.arange(self.n_y), self.obs_ix] = 1.0
        return h

    def complement_matrix(self) -> np.ndarray:
        n_u = self.n_x - self.n_y
        hc = np.zeros((n_u, self.n_x))
        hc[np.arange(n_u), self.unobs_ix] = 1.0
        return hc


class ObservationRecord(NamedTuple):
    time_index: int
    y: np.ndarray


def observe(x, h: ObservationOperator):
    """Project onto the observed components; axis 0 is the grid axis."""
    x = np.asarray(x)
    if x.shape[0] != h.n_x:
        raise ValueError(f"state dim {x.shape[0]} != n_x {h.n_x}")
    return np.take(x, h.obs_ix, axis=0)


def observe_complement(x, h: ObservationOperator):
    """Project onto the unobserved components."""
    x = np.asarray(x)
    if x.shape[0] != h.n_x:
        raise ValueError(f"state dim {x.shape[0]} != n_x {h.n_x}")
    return np.take(x, h.unobs_ix, axis=0)


def split_error(eta, h: ObservationOperator):
    """Split a full-state vector into its observed and unobserved parts."""
    return observe(eta, h), observe_complement(eta, h)


def lift_error(eta_obs, eta_unobs, h: ObservationOperator):
    """Recombine observed/unobserved parts into a full-state vector.

    Inverse of :func:`split_error`; works on vectors or on batches whose
    first axis is the component axis.
    """
    eta_obs = np.asarray(eta_obs, dtype=float)
    eta_unobs = np.asarray(eta_unobs, dtype=float)
    if eta_obs.shape[0] != h.n_y or eta_unobs.shape[0] != h.n_x - h.n_y:
        raise ValueError("component dims do not match the operator")
    out = np.empty((h.n_x,) + eta_obs.shape[1:])
    out[h.obs_ix] = eta_obs
    out[h.unobs_ix] = eta_unobs
    return out


def synthesize_observations(truth_slow, h: ObservationOperator, r_diag, rng):
    """Noisy projections y_j = H x_j + eps_j with eps_j ~ N(0, diag(r_diag)).

    ``truth_slow`` has one state per row; the result has matching rows.  Noise
    is independent across times and components.
    """
    truth_slow = np.atleast_2d(np.asarray(truth_slow, dtype=float))
    r_diag = np.broadcast_to(np.asarray(r_diag, dtype=float), (h.n_y,))
    if np.any(r_diag < 0):
        raise ValueError("observation error variances must be non-negative")
    clean = truth_slow[:, h.obs_ix]
    noise = rng.standard_normal(clean.shape) * np.sqrt(r_diag)
    return clean + noise


def to_records(y, start_index=1):
    """Wrap observation rows as (time_index, y) records."""
    return [ObservationRecord(start_index + j, np.asarray(row))
            for j, row in enumerate(np.atleast_2d(y))]


def save_observations(path, y, start_index=1):
    """Write observations as CSV ``time_index, y_1..y_Ny``."""
    y = np.atleast_2d(np.asarray(y))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_index"] + [f"y_{i}" for i in range(1, y.shape[1] + 1)])
        for j, row in enumerate(y):
            writer.writerow([start_index + j] + [f"{v:.17g}" for v in row])


def load_observations(path):
    """Read an observation CSV back into ``(time_index, y)`` arrays."""
    data = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
    return data[:, 0].astype(int), data[:, 1:]
