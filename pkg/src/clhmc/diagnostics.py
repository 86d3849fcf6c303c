"""Verification metrics: RMSE, rank histograms and chi-square QQ data."""

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .ensemble import as_ensemble, localization_matrix
from .errors import InvalidInputError

METRIC_COLUMNS = ("cycle", "rmse_forecast", "rmse_analysis", "acceptance_rate")


def rmse(x, truth):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if x.shape != truth.shape:
        raise InvalidInputError(f"length mismatch: {x.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((x - truth) ** 2)))


def rank_of_truth(ens, truth, variable_stride=1, seed=None):
    """Rank of the truth within the ensemble at every ``variable_stride``-th variable.

    The rank counts members strictly below the truth; each tied member adds
    one more with probability one half.
    """
    if variable_stride < 1:
        raise InvalidInputError("variable stride must be >= 1")
    ens = as_ensemble(ens)
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if truth.size != ens.shape[1]:
        raise InvalidInputError("truth does not match ensemble width")
    sel = np.arange(0, truth.size, variable_stride)
    members = ens[:, sel]
    t = truth[sel]
    below = (members < t).sum(axis=0)
    ties = members == t
    if ties.any():
        rng = np.random.default_rng(seed)
        below = below + (ties & (rng.random(ties.shape) < 0.5)).sum(axis=0)
    return below.astype(int)


@dataclass
class RankHistogram:
    bins: np.ndarray
    variable_stride: int = 1
    cycles: int = 0

    @property
    def n_ens(self):
        return self.bins.size - 1

    def chi_square_pvalue(self):
        """Goodness-of-fit p-value against a flat histogram."""
        total = self.bins.sum()
        if total == 0:
            return float("nan")
        return float(stats.chisquare(self.bins).pvalue)

    def to_dict(self):
        return {"bins": [int(b) for b in self.bins], "variable_stride": self.variable_stride,
                "cycles": self.cycles}


def accumulate_rank_histogram(ranks, n_ens, variable_stride=1):
    """Bin ranks collected over cycles (a list of per-cycle rank arrays)."""
    bins = np.zeros(n_ens + 1, dtype=int)
    cycles = 0
    for r in ranks:
        r = np.atleast_1d(np.asarray(r, dtype=int))
        if r.size and (r.min() < 0 or r.max() > n_ens):
            raise InvalidInputError("rank outside [0, n_ens]")
        bins += np.bincount(r, minlength=n_ens + 1)
        cycles += 1
    return RankHistogram(bins, variable_stride, cycles)


@dataclass
class QqData:
    distances: np.ndarray
    quantiles: np.ndarray
    dof: int

    def to_dict(self):
        return {"distances": self.distances.tolist(), "quantiles": self.quantiles.tolist(),
                "dof": self.dof}


def _mahalanobis_sq(dev, cov):
    """Rows of ``dev`` against ``cov``; ``None`` when ``cov`` is not positive definite."""
    try:
        c = cho_factor(cov)
    except LinAlgError:
        return None
    return np.einsum("ij,ij->i", dev, cho_solve(c, dev.T).T)


def chi_square_qq(ens, radius=None, distance_fn=None, max_dense=2000):
    """Squared Mahalanobis distances of members from the mean, with chi-square quantiles.

    With more members than variables the full (optionally localized)
    covariance is used and the reference has ``n_var`` degrees of freedom.
    Otherwise distances are taken inside the span of the anomalies, with the
    localized covariance projected onto an orthonormal anomaly basis, and the
    reference has ``n_ens - 1`` degrees of freedom. Above ``max_dense``
    variables the diagonal of the covariance replaces the localized matrix.
    A singular covariance falls back to its diagonal with a warning.
    """
    ens = as_ensemble(ens)
    n_ens, n_var = ens.shape
    if n_ens < 2:
        raise InvalidInputError("QQ data needs at least two members")
    dev = ens - ens.mean(axis=0)
    localize = radius is not None and distance_fn is not None and np.isfinite(radius)

    def covariance():
        if n_var > max_dense:
            return None
        cov = dev.T @ dev / (n_ens - 1)
        if localize:
            cov = cov * localization_matrix(n_var, distance_fn, radius)
        return cov

    if n_ens > n_var:
        dof = n_var
        cov = covariance()
        d2 = _mahalanobis_sq(dev, cov if cov is not None else np.diag(np.diag(dev.T @ dev) / (n_ens - 1)))
        diag_var = (dev * dev).sum(axis=0) / (n_ens - 1)
        coords = dev
    else:
        dof = n_ens - 1
        u, s, _ = np.linalg.svd(dev.T, full_matrices=False)
        keep = s > s.max(initial=0.0) * 1e-10
        u = u[:, keep]
        coords = dev @ u
        cov = covariance()
        if cov is None:
            var = (dev * dev).sum(axis=0) / (n_ens - 1)
            proj = (u * var[:, None]).T @ u
        else:
            proj = u.T @ cov @ u
        d2 = _mahalanobis_sq(coords, proj) if u.shape[1] else None
        diag_var = (coords * coords).sum(axis=0) / (n_ens - 1)

    if d2 is None:
        warnings.warn("covariance is singular; using its diagonal", RuntimeWarning)
        safe = np.where(diag_var > 0, diag_var, np.inf)
        d2 = (coords * coords / safe).sum(axis=1) if coords.shape[1] else np.zeros(n_ens)
    probs = (np.arange(1, n_ens + 1) - 0.5) / n_ens
    return QqData(np.sort(d2), stats.chi2.ppf(probs, max(dof, 1)), dof)


def write_metrics_csv(path, rows):
    """``rows`` are dicts (or tuples) in :data:`METRIC_COLUMNS` order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in METRIC_COLUMNS]
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{"cycle": int(r["cycle"]), **{c: float(r[c]) for c in METRIC_COLUMNS[1:]}}
                for r in reader]


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
