"""Gaussian mixture density estimation of a prior ensemble.

EM fitting with restarts, AIC/BIC model selection under a minimum
membership constraint, mixture moments, density evaluation and sampling.
Covariances are diagonal unless a fit is explicitly asked for full ones.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .ensemble import CovarianceEstimate, as_ensemble
from .errors import DegenerateComponentError, FitFailureError, InvalidInputError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
MIN_COMPONENT_MASS = 1e-8
MAX_DEGENERATE_RETRIES = 3


@dataclass(frozen=True)
class GmmParams:
    """Weights, means and covariances of a Gaussian mixture.

    ``covariances`` is ``(n_c, d)`` when ``diagonal`` else ``(n_c, d, d)``.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    diagonal: bool = True
    log_dets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        cov = np.asarray(self.covariances, dtype=float)
        if self.diagonal and cov.ndim == 1:
            cov = cov[:, None]
        n_c, d = mu.shape
        if w.shape != (n_c,):
            raise InvalidInputError("weights and means disagree on component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidInputError("mixing weights must be positive and sum to one")
        expected = (n_c, d) if self.diagonal else (n_c, d, d)
        if cov.shape != expected:
            raise InvalidInputError(f"covariances have shape {cov.shape}, expected {expected}")
        if self.diagonal:
            if np.any(cov <= 0):
                raise InvalidInputError("component variances must be positive")
            log_dets = np.log(cov).sum(axis=1)
        else:
            log_dets = np.empty(n_c)
            for i in range(n_c):
                sign, ld = np.linalg.slogdet(cov[i])
                if sign <= 0:
                    raise InvalidInputError(f"component {i} covariance is not positive definite")
                log_dets[i] = ld
        for name, arr in (("weights", w), ("means", mu), ("covariances", cov), ("log_dets", log_dets)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def variances(self):
        if self.diagonal:
            return self.covariances
        return np.stack([np.diag(c) for c in self.covariances])

    def component(self, i):
        return self.means[i], CovarianceEstimate(
            "diagonal" if self.diagonal else "full", self.covariances[i]
        )

    def permuted(self, order):
        order = np.asarray(order)
        return GmmParams(self.weights[order], self.means[order],
                         self.covariances[order], self.diagonal)

    def to_dict(self):
        out = {"weights": self.weights.tolist(), "means": self.means.tolist()}
        if self.diagonal:
            out["variances"] = self.covariances.tolist()
        else:
            out["covariances"] = self.covariances.tolist()
        out["diagonal"] = bool(self.diagonal)
        return out

    @classmethod
    def from_dict(cls, payload):
        diagonal = bool(payload.get("diagonal", True))
        key = "variances" if diagonal else "covariances"
        if key not in payload:
            raise InvalidInputError(f"GMM payload lacks {key!r}")
        weights = np.asarray(payload["weights"], dtype=float)
        # serialized weights are rounded; renormalize
        return cls(weights / weights.sum(), payload["means"], payload[key], diagonal)


def save_gmm_json(path, params):
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=1)


def load_gmm_json(path):
    with open(path) as fh:
        return GmmParams.from_dict(json.load(fh))


class Responsibilities(NamedTuple):
    r: np.ndarray
    w: np.ndarray

    def hard_labels(self):
        return np.argmax(self.r, axis=1)

    def hard_counts(self):
        return np.bincount(self.hard_labels(), minlength=self.r.shape[1])


class EmFit(NamedTuple):
    params: GmmParams
    responsibilities: Responsibilities
    log_likelihood: float
    history: list
    n_iter: int
    converged: bool


@dataclass
class ModelSelectionReport:
    criterion: str
    candidates: list
    values: dict
    selected: int
    fits: dict
    discarded: list

    @property
    def params(self):
        return self.fits[self.selected].params

    @property
    def selected_fit(self):
        return self.fits[self.selected]


def component_log_densities(data, params):
    """``log tau_i + log N(x_e; mu_i, Sigma_i)`` as an ``(n, n_c)`` array."""
    X = np.atleast_2d(np.asarray(data, dtype=float))
    if X.shape[1] != params.dim:
        raise InvalidInputError(f"data dimension {X.shape[1]} != mixture dimension {params.dim}")
    d = params.dim
    out = np.empty((X.shape[0], params.n_components))
    for i in range(params.n_components):
        diff = X - params.means[i]
        if params.diagonal:
            maha = np.einsum("ej,ej->e", diff, diff / params.covariances[i])
        else:
            chol = np.linalg.cholesky(params.covariances[i])
            z = np.linalg.solve(chol, diff.T)
            maha = np.einsum("je,je->e", z, z)
        out[:, i] = np.log(params.weights[i]) - 0.5 * (d * LOG_2PI + params.log_dets[i] + maha)
    return out


def gmm_log_pdf(x, params):
    """Log mixture density at a single state (log-sum-exp stabilized)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite state passed to gmm_log_pdf")
    return float(logsumexp(component_log_densities(x[None, :], params)[0]))


def log_likelihood(data, params):
    return float(logsumexp(component_log_densities(data, params), axis=1).sum())


def _e_step(data, params):
    with np.errstate(over="ignore", invalid="ignore"):
        logp = component_log_densities(data, params)
        norm = logsumexp(logp, axis=1)
        bad = ~np.isfinite(norm)
        r = np.exp(logp - norm[:, None])
    if np.any(bad):
        warnings.warn(
            f"{bad.sum()} members underflow under every component; "
            "assigning them to the nearest mean",
            RuntimeWarning,
            stacklevel=3,
        )
        for e in np.flatnonzero(bad):
            diff = params.means - data[e]
            # rescale so far-away members do not overflow the distance
            scale = np.abs(diff).max()
            nearest = np.argmin(((diff / scale) ** 2).sum(axis=1)) if scale > 0 else 0
            r[e] = 0.0
            r[e, nearest] = 1.0
        norm = np.where(bad, -np.inf, norm)
    resp = Responsibilities(r, r.sum(axis=0))
    return resp, float(norm[~bad].sum()) if np.any(~bad) else -np.inf


def e_step(data, params):
    """Posterior membership probabilities computed in log space."""
    data = as_ensemble(data)
    return _e_step(data, params)[0]


def m_step(data, resp, diagonal_only=True, var_floor=0.0):
    """Closed-form parameter update given responsibilities.

    Covariances use divisor ``w_i``; variances are floored at ``var_floor``.
    """
    X = as_ensemble(data)
    r = np.asarray(resp.r, dtype=float)
    n, d = X.shape
    w = r.sum(axis=0)
    for i, wi in enumerate(w):
        if not wi > MIN_COMPONENT_MASS:
            raise DegenerateComponentError(i)
    weights = w / n
    means = (r.T @ X) / w[:, None]
    floor = np.broadcast_to(np.asarray(var_floor, dtype=float), (d,))
    if diagonal_only:
        covs = np.empty((len(w), d))
        for i in range(len(w)):
            diff = X - means[i]
            covs[i] = np.maximum((r[:, i] @ (diff * diff)) / w[i], floor)
    else:
        covs = np.empty((len(w), d, d))
        for i in range(len(w)):
            diff = X - means[i]
            c = (diff * r[:, i, None]).T @ diff / w[i]
            c = 0.5 * (c + c.T)
            idx = np.arange(d)
            c[idx, idx] = np.maximum(c[idx, idx], floor)
            covs[i] = c
    return GmmParams(weights / weights.sum(), means, covs, diagonal_only)


def default_var_floor(data):
    """``1e-8`` times the mean per-coordinate variance of the data."""
    X = as_ensemble(data)
    scale = float(X.var(axis=0).mean()) if X.shape[0] > 1 else 0.0
    return 1e-8 * scale if scale > 0 else 1e-12


def _initial_params(X, n_c, rng, diagonal_only, floor):
    n, d = X.shape
    idx = rng.choice(n, size=n_c, replace=False)
    means = X[idx]
    if diagonal_only:
        var = X.var(axis=0, ddof=1) if n > 1 else np.zeros(d)
        covs = np.tile(np.maximum(var, floor), (n_c, 1))
    else:
        full = np.atleast_2d(np.cov(X, rowvar=False)) if n > 1 else np.zeros((d, d))
        di = np.arange(d)
        full[di, di] = np.maximum(full[di, di], floor)
        covs = np.tile(full, (n_c, 1, 1))
    return GmmParams(np.full(n_c, 1.0 / n_c), means, covs, diagonal_only)


def _run_em(X, params, max_iter, rel_tol, diagonal_only, floor):
    resp, ll = _e_step(X, params)
    history = [ll]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        params = m_step(X, resp, diagonal_only, floor)
        resp, ll_new = _e_step(X, params)
        history.append(ll_new)
        if abs(ll_new - ll) <= rel_tol * max(abs(ll), 1e-300):
            ll = ll_new
            converged = True
            break
        ll = ll_new
    return EmFit(params, resp, ll, history, n_iter, converged)


def em_fit(data, n_c, seed=None, max_iter=200, rel_tol=1e-6, diagonal_only=True,
           var_floor=None, n_init=3):
    """Fit an ``n_c``-component mixture by EM, keeping the best of ``n_init`` starts.

    Initial weights are equal, means are drawn from the data without
    replacement, covariances are the full-ensemble covariance. A start that
    runs into a degenerate component is redrawn, at most three extra times.
    """
    X = as_ensemble(data)
    n = X.shape[0]
    if n_c < 1 or n_c > n:
        raise InvalidInputError(f"cannot fit {n_c} components to {n} members")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be >= 1")
    floor = default_var_floor(X) if var_floor is None else var_floor
    rng = np.random.default_rng(seed)
    best = None
    failures = 0
    good = 0
    while good < n_init:
        init = _initial_params(X, n_c, rng, diagonal_only, floor)
        try:
            fit = _run_em(X, init, max_iter, rel_tol, diagonal_only, floor)
        except DegenerateComponentError as exc:
            failures += 1
            log.debug("EM start hit %s (%d failures)", exc, failures)
            if failures > MAX_DEGENERATE_RETRIES:
                if best is not None:
                    break
                raise FitFailureError(
                    f"{n_c}-component EM degenerated after {MAX_DEGENERATE_RETRIES} restarts"
                ) from exc
            continue
        good += 1
        if best is None or fit.log_likelihood > best.log_likelihood:
            best = fit
    return best


def n_free_parameters(params):
    n_c, d = params.n_components, params.dim
    if params.diagonal:
        return (n_c - 1) + n_c * d + n_c * d
    return (n_c - 1) + n_c * d + n_c * d * (d + 1) // 2


def criterion_value(params, data, kind="aic", ll=None):
    """AIC ``-2 LL + 2k`` or BIC ``-2 LL + log(n) k``."""
    X = as_ensemble(data)
    if ll is None:
        ll = log_likelihood(X, params)
    k = n_free_parameters(params)
    kind = kind.lower()
    if kind == "aic":
        return -2.0 * ll + 2.0 * k
    if kind == "bic":
        return -2.0 * ll + np.log(X.shape[0]) * k
    raise InvalidInputError(f"unknown criterion {kind!r}")


def _fit_candidate(X, n_c, seed, diagonal_only, max_iter, rel_tol, var_floor):
    try:
        return em_fit(X, n_c, seed=[int(seed), int(n_c)], max_iter=max_iter,
                      rel_tol=rel_tol, diagonal_only=diagonal_only, var_floor=var_floor)
    except FitFailureError as exc:
        log.info("dropping n_c=%d: %s", n_c, exc)
        return None


def select_model(data, n_c_range, criterion="aic", min_members=5, seed=0,
                 diagonal_only=True, max_iter=200, rel_tol=1e-6, var_floor=None,
                 executor=None):
    """Fit every candidate component count and keep the criterion minimizer.

    Candidates whose hard-assigned membership falls below ``min_members`` in
    any component are discarded; with nothing left the one-component fit is
    returned. Exact ties go to the smaller count.
    """
    X = as_ensemble(data)
    n = X.shape[0]
    candidates = sorted({int(c) for c in n_c_range if 1 <= int(c) <= n})
    if not candidates:
        raise InvalidInputError("no admissible component counts")
    if executor is None:
        fits = [_fit_candidate(X, c, seed, diagonal_only, max_iter, rel_tol, var_floor)
                for c in candidates]
    else:
        futures = [executor.submit(_fit_candidate, X, c, seed, diagonal_only,
                                   max_iter, rel_tol, var_floor) for c in candidates]
        fits = [f.result() for f in futures]

    values, kept, discarded = {}, {}, []
    for c, fit in zip(candidates, fits):
        if fit is None:
            discarded.append(c)
            continue
        kept[c] = fit
        values[c] = criterion_value(fit.params, X, criterion, ll=fit.log_likelihood)
        if fit.responsibilities.hard_counts().min() < min_members:
            discarded.append(c)

    admissible = [c for c in kept if c not in discarded]
    if admissible:
        selected = min(admissible, key=lambda c: (values[c], c))
    else:
        selected = 1
        if 1 not in kept:
            kept[1] = em_fit(X, 1, seed=[int(seed), 1], max_iter=max_iter,
                             rel_tol=rel_tol, diagonal_only=diagonal_only,
                             var_floor=var_floor)
            values[1] = criterion_value(kept[1].params, X, criterion,
                                        ll=kept[1].log_likelihood)
    return ModelSelectionReport(criterion.lower(), candidates, values, selected, kept, discarded)


def gmm_joint_moments(params, diagonal_only=False):
    """Mixture mean and covariance (within plus between-component spread)."""
    tau = params.weights
    mean = tau @ params.means
    dev = params.means - mean
    if diagonal_only:
        var = tau @ params.variances + tau @ (dev * dev)
        return mean, CovarianceEstimate("diagonal", var)
    if params.diagonal:
        within = np.diag(tau @ params.covariances)
    else:
        within = np.einsum("i,ijk->jk", tau, params.covariances)
    between = (dev * tau[:, None]).T @ dev
    return mean, CovarianceEstimate("full", within + between)


def sample_gmm(params, n, seed=None):
    """Draw ``n`` states: a component index from the weights, then a Gaussian draw."""
    if n < 1:
        raise InvalidInputError("sample size must be >= 1")
    rng = np.random.default_rng(seed)
    comps = rng.choice(params.n_components, size=n, p=params.weights)
    z = rng.standard_normal((n, params.dim))
    if params.diagonal:
        return params.means[comps] + np.sqrt(params.covariances[comps]) * z
    chols = np.stack([np.linalg.cholesky(c) for c in params.covariances])
    return params.means[comps] + np.einsum("ejk,ek->ej", chols[comps], z)
