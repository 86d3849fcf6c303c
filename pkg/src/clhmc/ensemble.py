"""Ensemble primitives shared by every filter.

An ensemble is a 2-D array of shape ``(n_ens, n_var)``: one member per row.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class CovarianceEstimate:
    """A covariance matrix, or just its diagonal when ``kind == "diagonal"``."""

    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in ("full", "diagonal"):
            raise InvalidInputError(f"unknown covariance kind {self.kind!r}")

    @property
    def is_diagonal(self):
        return self.kind == "diagonal"

    @property
    def variances(self):
        return self.data if self.is_diagonal else np.diag(self.data)

    def to_dense(self):
        return np.diag(self.data) if self.is_diagonal else np.asarray(self.data)


@dataclass(frozen=True)
class Observation:
    """Observation vector with its (diagonal) error variances."""

    values: np.ndarray
    error_variances: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        variances = np.broadcast_to(
            np.asarray(self.error_variances, dtype=float), values.shape
        ).copy()
        if values.size < 1:
            raise InvalidInputError("observation vector is empty")
        if np.any(variances <= 0):
            raise InvalidInputError("observation error variances must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "error_variances", variances)

    @property
    def size(self):
        return self.values.size


def as_ensemble(members):
    """Validate and return members as a float ``(n_ens, n_var)`` array."""
    ens = np.asarray(members, dtype=float)
    if ens.ndim == 1:
        ens = ens[:, None]
    if ens.ndim != 2 or ens.shape[0] == 0:
        raise InvalidInputError("ensemble must be a non-empty (n_ens, n_var) array")
    if not np.all(np.isfinite(ens)):
        raise InvalidInputError("ensemble contains non-finite entries")
    return ens


def ensemble_mean(ens):
    ens = as_ensemble(ens)
    return ens.mean(axis=0)


def anomalies(ens):
    ens = as_ensemble(ens)
    return ens - ens.mean(axis=0)


def ensemble_covariance(ens, diagonal_only=False):
    """Unbiased sample covariance (divisor ``n_ens - 1``)."""
    ens = as_ensemble(ens)
    n_ens = ens.shape[0]
    if n_ens < 2:
        raise InvalidInputError("covariance needs at least two members")
    dev = ens - ens.mean(axis=0)
    if diagonal_only:
        return CovarianceEstimate("diagonal", (dev * dev).sum(axis=0) / (n_ens - 1))
    return CovarianceEstimate("full", dev.T @ dev / (n_ens - 1))


def weighted_norm_sq(a, b, c_inv):
    """``(a - b)^T C (a - b)`` where ``c_inv`` holds the inverse covariance ``C``.

    ``c_inv`` may be a :class:`CovarianceEstimate`, a diagonal vector, or a
    dense matrix.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if isinstance(c_inv, CovarianceEstimate):
        if c_inv.is_diagonal:
            c_inv = c_inv.data
        else:
            c_inv = np.asarray(c_inv.data)
    c_inv = np.asarray(c_inv, dtype=float)
    if c_inv.ndim == 1:
        if c_inv.shape != diff.shape:
            raise InvalidInputError("dimension mismatch with weighting diagonal")
        return float(np.dot(diff * c_inv, diff))
    if c_inv.shape != (diff.size, diff.size):
        raise InvalidInputError("dimension mismatch with weighting matrix")
    return float(diff @ c_inv @ diff)


def gaspari_cohn(distance, radius):
    """Fifth-order piecewise rational compactly supported correlation.

    Weight is 1 at zero distance and vanishes for ``distance >= 2 * radius``.
    Accepts scalars or arrays.
    """
    if radius <= 0:
        raise InvalidInputError("localization radius must be positive")
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise InvalidInputError("distance must be non-negative")
    r = d / radius
    out = np.zeros_like(r)
    inner = r <= 1.0
    outer = (r > 1.0) & (r < 2.0)
    ri = r[inner]
    out[inner] = (((-0.25 * ri + 0.5) * ri + 0.625) * ri - 5.0 / 3.0) * ri**2 + 1.0
    ro = r[outer]
    out[outer] = (
        ((((ro / 12.0 - 0.5) * ro + 0.625) * ro + 5.0 / 3.0) * ro - 5.0) * ro
        + 4.0
        - 2.0 / (3.0 * ro)
    )
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def grid_distance_fn(nx, ny):
    """Euclidean distance in grid cells between flattened (row-major) indices."""

    def distance(i, j):
        i = np.asarray(i)
        j = np.asarray(j)
        yi, xi = np.divmod(i, nx)
        yj, xj = np.divmod(j, nx)
        return np.hypot(xi - xj, yi - yj)

    return distance


def localization_matrix(n_var, distance_fn, radius, rows=None, cols=None):
    """Gaspari-Cohn weights for index pairs; optionally a row/column subset."""
    rows = np.arange(n_var) if rows is None else np.asarray(rows)
    cols = np.arange(n_var) if cols is None else np.asarray(cols)
    dist = distance_fn(rows[:, None], cols[None, :])
    if np.isinf(radius):
        return np.ones(dist.shape)
    return gaspari_cohn(dist, radius)


def apply_localization(cov, distance_fn, radius):
    """Schur (Hadamard) product of a full covariance with Gaspari-Cohn weights."""
    if cov.is_diagonal:
        return cov
    data = np.asarray(cov.data)
    weights = localization_matrix(data.shape[0], distance_fn, radius)
    return CovarianceEstimate("full", data * weights)


def inflate(ens, delta):
    """Scale anomalies about the ensemble mean by ``delta``."""
    if delta < 1:
        raise InvalidInputError("inflation factor must be >= 1")
    ens = as_ensemble(ens)
    mean = ens.mean(axis=0)
    return mean + delta * (ens - mean)


def write_ensemble_csv(path, ens):
    ens = as_ensemble(ens)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member_id"] + [f"x_{i}" for i in range(ens.shape[1])])
        for e, row in enumerate(ens):
            writer.writerow([e] + [repr(float(v)) for v in row])


def read_ensemble_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "member_id":
            raise InvalidInputError(f"{path}: missing member_id header")
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    return as_ensemble(np.array(rows))
