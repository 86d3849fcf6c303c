"""Negative log-posterior potentials and observation operators.

Two posteriors are covered: a Gaussian prior (``GaussianPotential``) and a
Gaussian mixture prior (``MixturePotential``), both with Gaussian,
diagonal-covariance observation errors. Potentials are immutable after
construction and safe to evaluate from several threads.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import _kernels
from .ensemble import CovarianceEstimate
from .errors import InvalidInputError


class ObservationOperator:
    """Maps a state to observation space.

    Subclasses provide ``apply``, ``tangent`` (Jacobian-vector product at
    ``x``) and ``adjoint_apply`` (transposed Jacobian times ``v`` at ``x``).
    """

    linear = False
    n_var = None
    m_obs = None

    def apply(self, x):
        raise NotImplementedError

    def tangent(self, x, dx):
        raise NotImplementedError

    def adjoint_apply(self, x, v):
        raise NotImplementedError

    def apply_many(self, X):
        return np.stack([self.apply(x) for x in np.atleast_2d(X)])


class IdentityOperator(ObservationOperator):
    linear = True

    def __init__(self, n_var):
        self.n_var = self.m_obs = int(n_var)
        self.indices = np.arange(self.n_var)

    def apply(self, x):
        return np.asarray(x, dtype=float).copy()

    def tangent(self, x, dx):
        return np.asarray(dx, dtype=float).copy()

    def adjoint_apply(self, x, v):
        return np.asarray(v, dtype=float).copy()

    def apply_many(self, X):
        return np.array(X, dtype=float)

    def matrix(self):
        return np.eye(self.n_var)


class IndexObservation(ObservationOperator):
    """Observe a subset of state components (gather, with scatter adjoint)."""

    linear = True

    def __init__(self, indices, n_var):
        self.indices = np.asarray(indices, dtype=np.intp)
        self.n_var = int(n_var)
        self.m_obs = self.indices.size
        if self.m_obs < 1 or self.indices.min() < 0 or self.indices.max() >= self.n_var:
            raise InvalidInputError("observation indices out of range")

    def apply(self, x):
        return np.asarray(x, dtype=float)[self.indices]

    def tangent(self, x, dx):
        return np.asarray(dx, dtype=float)[self.indices]

    def adjoint_apply(self, x, v):
        out = np.zeros(self.n_var)
        np.add.at(out, self.indices, v)
        return out

    def apply_many(self, X):
        return np.asarray(X, dtype=float)[:, self.indices]

    def matrix(self):
        H = np.zeros((self.m_obs, self.n_var))
        H[np.arange(self.m_obs), self.indices] = 1.0
        return H


class MatrixOperator(ObservationOperator):
    linear = True

    def __init__(self, H):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.m_obs, self.n_var = self.H.shape

    def apply(self, x):
        return self.H @ np.asarray(x, dtype=float)

    def tangent(self, x, dx):
        return self.H @ np.asarray(dx, dtype=float)

    def adjoint_apply(self, x, v):
        return self.H.T @ np.asarray(v, dtype=float)

    def apply_many(self, X):
        return np.asarray(X, dtype=float) @ self.H.T

    def matrix(self):
        return self.H


def obs_misfit(x, obs, op):
    """``0.5 * ||y - H(x)||^2`` weighted by the inverse error variances."""
    resid = obs.values - op.apply(x)
    return 0.5 * float(np.dot(resid, resid / obs.error_variances))


def _obs_term(x, obs, op):
    if obs is None:
        return 0.0, 0.0
    hx = op.apply(x)
    scaled = (hx - obs.values) / obs.error_variances
    value = 0.5 * float(np.dot(hx - obs.values, scaled))
    return value, op.adjoint_apply(x, scaled)


class _Potential:
    def value(self, x):
        return self.value_and_gradient(x)[0]

    def gradient(self, x):
        return self.value_and_gradient(x)[1]

    def __call__(self, x):
        return self.value(x)


class GaussianPotential(_Potential):
    """``0.5 ||x - xb||^2_{B^-1} + 0.5 ||y - H(x)||^2_{R^-1}`` and its gradient."""

    def __init__(self, background, covariance, obs=None, op=None):
        self.background = np.atleast_1d(np.asarray(background, dtype=float))
        if not isinstance(covariance, CovarianceEstimate):
            arr = np.asarray(covariance, dtype=float)
            covariance = CovarianceEstimate("diagonal" if arr.ndim <= 1 else "full",
                                            np.atleast_1d(arr) if arr.ndim <= 1 else arr)
        self.covariance = covariance
        self.obs = obs
        self.op = op
        if obs is not None and op is None:
            raise InvalidInputError("an observation needs an observation operator")
        if covariance.is_diagonal:
            var = np.asarray(covariance.data, dtype=float)
            if np.any(var <= 0):
                raise InvalidInputError("background variances must be positive")
            self._inv_var = 1.0 / var
            self._chol = None
        else:
            try:
                self._chol = cho_factor(np.asarray(covariance.data, dtype=float))
            except LinAlgError as exc:
                raise InvalidInputError("background covariance is singular") from exc

    def prior_gradient_operator(self, v):
        if self._chol is None:
            return self._inv_var * v
        return cho_solve(self._chol, v)

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        diff = x - self.background
        g = self.prior_gradient_operator(diff)
        value = 0.5 * float(np.dot(diff, g))
        ov, og = _obs_term(x, self.obs, self.op)
        return value + ov, g + og


def component_quadratic(x, i, gmm):
    """``0.5 ||x - mu_i||^2_{Sigma_i^-1}`` and its gradient."""
    diff = np.asarray(x, dtype=float) - gmm.means[i]
    if gmm.diagonal:
        grad = diff / gmm.covariances[i]
    else:
        grad = np.linalg.solve(gmm.covariances[i], diff)
    return 0.5 * float(np.dot(diff, grad)), grad


class MixturePotential(_Potential):
    """Negative log posterior for a Gaussian mixture prior.

    The prior part is evaluated relative to the component with the largest
    term ``tau_i |Sigma_i|^{-1/2} exp(-J_i(x))`` at the current ``x``, so the
    log of the correction sum never sees values above one.
    """

    def __init__(self, gmm, obs=None, op=None):
        self.gmm = gmm
        self.obs = obs
        self.op = op
        if obs is not None and op is None:
            raise InvalidInputError("an observation needs an observation operator")
        self.log_coefs = np.ascontiguousarray(np.log(gmm.weights) - 0.5 * gmm.log_dets)
        self.means = np.ascontiguousarray(gmm.means)
        if gmm.diagonal:
            self.inv_vars = np.ascontiguousarray(1.0 / gmm.covariances)
        else:
            self._chols = [cho_factor(c) for c in gmm.covariances]

    def leading_component(self, x):
        x = np.asarray(x, dtype=float)
        terms = [self.log_coefs[i] - component_quadratic(x, i, self.gmm)[0]
                 for i in range(self.gmm.n_components)]
        return int(np.argmax(terms))

    def prior_value_and_gradient(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if self.gmm.diagonal:
            return _kernels.mixture_prior(x, self.means, self.inv_vars, self.log_coefs)
        k = self.gmm.n_components
        quads = np.empty(k)
        grads = np.empty((k, x.size))
        for i in range(k):
            diff = x - self.means[i]
            grads[i] = cho_solve(self._chols[i], diff)
            quads[i] = 0.5 * float(np.dot(diff, grads[i]))
        log_terms = self.log_coefs - quads
        lead = int(np.argmax(log_terms))
        ratios = np.exp(log_terms - log_terms[lead])
        ratios[lead] = 0.0
        s = ratios.sum()
        value = quads[lead] - self.log_coefs[lead] - np.log1p(s)
        grad = grads[lead] - (ratios[:, None] * (grads[lead] - grads)).sum(axis=0) / (1.0 + s)
        return value, grad

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        pv, pg = self.prior_value_and_gradient(x)
        ov, og = _obs_term(x, self.obs, self.op)
        return float(pv) + ov, pg + og


def mixture_potential(x, gmm, obs, op):
    return MixturePotential(gmm, obs, op).value(x)


def mixture_potential_gradient(x, gmm, obs, op):
    return MixturePotential(gmm, obs, op).gradient(x)


def gaussian_potential(x, background, covariance, obs, op):
    return GaussianPotential(background, covariance, obs, op).value_and_gradient(x)
