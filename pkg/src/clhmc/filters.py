"""Sequential filter analysis steps and the forecast driver.

Four analysis schemes share one calling convention,
``analysis(forecast, obs, op, cfg) -> CycleResult``:

* ``HMC``: Gaussian prior from the forecast mean and variances, one chain.
* ``ClHMC``: Gaussian-mixture prior fitted to the forecast, one chain.
* ``MC_ClHMC``: mixture prior, one chain per component started at the
  component mean, sample counts split by weight times likelihood.
* ``DEnKF``: deterministic ensemble Kalman filter with localization.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from .ensemble import (
    CovarianceEstimate,
    Observation,
    anomalies,
    as_ensemble,
    ensemble_covariance,
    ensemble_mean,
    localization_matrix,
)
from .errors import FitFailureError, InvalidInputError, MemberPropagationError
from .gmm import select_model
from .hmc import ChainConfig, MassMatrix, TrajectoryParams, make_rng, run_chain
from .potentials import GaussianPotential, IndexObservation, MixturePotential, obs_misfit

log = logging.getLogger(__name__)

FILTER_KINDS = ("HMC", "ClHMC", "MC_ClHMC", "DEnKF")
INIT_POLICIES = ("ensemble_mean", "max_weight_component_mean", "max_likelihood_component_mean")


def index_distance(i, j):
    return np.abs(np.asarray(i) - np.asarray(j)).astype(float)


@dataclass
class FilterConfig:
    """Settings for one analysis scheme.

    ``seed`` is an integer; chain ``i`` of a cycle draws from the stream
    ``(seed, i)``. ``variance_floor`` is an absolute lower bound applied to
    forecast variances wherever they enter a prior or a mass matrix.
    """

    kind: str = "HMC"
    trajectory: TrajectoryParams = field(default_factory=lambda: TrajectoryParams(0.075, 25, "three_stage"))
    burn_in: int = 50
    mixing_steps: int = 15
    seed: int = 0
    init_policy: str = "ensemble_mean"
    full_covariance: bool = False
    # mixture selection
    criterion: str = "aic"
    n_c_range: tuple = (1, 2, 3, 4, 5)
    min_members: int = 5
    diagonal_gmm: bool = True
    em_max_iter: int = 200
    em_rel_tol: float = 1e-6
    # multi-chain; mass_policy "local" uses per-component members, "global" the full ensemble
    mass_policy: str = "local"
    variance_blend: float = 0.0
    scale_step_by_components: bool = False
    variance_floor: float = 1e-10
    # DEnKF
    localization_radius: float = float("inf")
    inflation: float = 1.0
    distance_fn: object = index_distance

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise InvalidInputError(f"unknown filter kind {self.kind!r}")
        if self.init_policy not in INIT_POLICIES:
            raise InvalidInputError(f"unknown chain init policy {self.init_policy!r}")
        if self.mass_policy not in ("local", "global"):
            raise InvalidInputError(f"unknown mass policy {self.mass_policy!r}")
        if self.inflation < 1:
            raise InvalidInputError("inflation factor must be >= 1")
        if not self.variance_floor > 0:
            raise InvalidInputError("variance floor must be positive")


@dataclass
class CycleResult:
    analysis: np.ndarray
    forecast: np.ndarray
    gmm_report: object = None
    chain_stats: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    allocation: list = None

    @property
    def n_components(self):
        return 1 if self.gmm_report is None else self.gmm_report.selected

    @property
    def acceptance_rate(self):
        props = sum(s.proposals for s in self.chain_stats)
        if not props:
            return float("nan")
        return sum(s.acceptances for s in self.chain_stats) / props


def forecast(model, analysis, t_from, t_to, executor=None, n_chunks=1):
    """Advance every member with ``model.advance``.

    Models exposing ``supports_batch = True`` receive whole ``(n, n_var)``
    blocks (split into ``n_chunks`` pieces when an executor is given);
    otherwise members go one at a time. Failures carry the member index.
    """
    ens = as_ensemble(analysis)
    if getattr(model, "supports_batch", False):
        blocks = np.array_split(np.arange(ens.shape[0]), max(1, min(n_chunks, ens.shape[0])))

        def run(idx):
            try:
                return model.advance(ens[idx], t_from, t_to)
            except MemberPropagationError as exc:
                raise MemberPropagationError(int(idx[exc.member]), exc) from exc

        if executor is None or len(blocks) == 1:
            parts = [run(b) for b in blocks]
        else:
            parts = list(executor.map(run, blocks))
        return np.vstack(parts)

    out = np.empty_like(ens)
    for e, member in enumerate(ens):
        try:
            out[e] = model.advance(member, t_from, t_to)
        except Exception as exc:
            raise MemberPropagationError(e, exc) from exc
        if not np.all(np.isfinite(out[e])):
            raise MemberPropagationError(e, "non-finite state")
    return out


def _variances(members):
    if members.shape[0] < 2:
        return None
    return ensemble_covariance(members, diagonal_only=True).data


def build_mass_matrix(forecast, labels=None, variance_floor=1e-10, variance_blend=0.0):
    """Diagonal mass matrix from forecast precisions.

    Without ``labels`` a single :class:`MassMatrix` from the full ensemble is
    returned. With per-member component labels a list with one mass matrix
    per component is returned; the local variances are averaged with
    ``variance_blend`` when it is positive, and components with fewer than two
    members use the full-ensemble variances instead.
    """
    ens = as_ensemble(forecast)
    glob = _variances(ens)
    if glob is None:
        raise InvalidInputError("mass matrix needs at least two members")
    if labels is None:
        return MassMatrix(1.0 / np.maximum(glob, variance_floor))
    labels = np.asarray(labels)
    masses = []
    for c in range(int(labels.max()) + 1):
        local = _variances(ens[labels == c])
        var = glob if local is None else local
        if variance_blend > 0:
            var = 0.5 * (var + variance_blend)
        masses.append(MassMatrix(1.0 / np.maximum(var, variance_floor)))
    return masses


def chain_masses(ens, labels, n_c, cfg):
    """One mass matrix per component following ``cfg.mass_policy``."""
    glob = build_mass_matrix(ens, variance_floor=cfg.variance_floor)
    if cfg.mass_policy == "global":
        return [glob] * n_c
    masses = build_mass_matrix(ens, labels, cfg.variance_floor, cfg.variance_blend)
    return masses + [glob] * (n_c - len(masses))


def component_log_likelihoods(gmm, obs, op):
    """``-0.5 ||y - H(mu_i)||^2_{R^-1}`` for each component mean."""
    return np.array([-obs_misfit(mu, obs, op) for mu in gmm.means])


def allocate_from_log_weights(log_raw, n_ens):
    """Split ``n_ens`` in proportion to ``exp(log_raw)``.

    Largest-remainder rounding keeps the total exact; every component with a
    finite log weight gets at least one sample. Such a sample is taken from
    the component whose count most exceeds its exact share, so the result
    does not depend on component order.
    """
    log_raw = np.asarray(log_raw, dtype=float)
    n_c = log_raw.size
    finite = np.isfinite(log_raw)
    if not finite.any():
        warnings.warn("all component weights underflow; allocating equally", RuntimeWarning)
        log_raw = np.zeros(n_c)
        finite = np.ones(n_c, dtype=bool)
    if n_ens < finite.sum():
        raise InvalidInputError("fewer samples than active components")
    probs = np.zeros(n_c)
    probs[finite] = np.exp(log_raw[finite] - logsumexp(log_raw[finite]))
    exact = n_ens * probs
    counts = np.floor(exact).astype(int)
    rem = exact - counts
    order = sorted(range(n_c), key=lambda i: (-rem[i], -probs[i], i))
    for i in order[: n_ens - counts.sum()]:
        counts[i] += 1
    for i in np.flatnonzero(finite & (counts == 0)):
        donors = [j for j in range(n_c) if counts[j] > 1]
        donor = max(donors, key=lambda j: (counts[j] - exact[j], probs[j], -j))
        counts[donor] -= 1
        counts[i] += 1
    return counts


def allocate_chain_sizes(gmm, obs, op, n_ens):
    """Per-component sample counts proportional to ``tau_i * l_i``."""
    log_raw = np.log(gmm.weights) + component_log_likelihoods(gmm, obs, op)
    return allocate_from_log_weights(log_raw, n_ens)


def init_chain_position(forecast, gmm=None, policy="ensemble_mean", obs=None, op=None):
    if policy == "ensemble_mean":
        return ensemble_mean(forecast)
    if gmm is None:
        raise InvalidInputError(f"policy {policy!r} needs mixture parameters")
    if policy == "max_weight_component_mean":
        return gmm.means[int(np.argmax(gmm.weights))].copy()
    if policy == "max_likelihood_component_mean":
        if obs is None or op is None:
            raise InvalidInputError("likelihood policy needs an observation and operator")
        return gmm.means[int(np.argmax(component_log_likelihoods(gmm, obs, op)))].copy()
    raise InvalidInputError(f"unknown chain init policy {policy!r}")


def _chain_config(cfg, initial, chain, burn_in=None):
    return ChainConfig(burn_in=cfg.burn_in if burn_in is None else burn_in,
                       mixing_steps=cfg.mixing_steps,
                       seed=make_rng(cfg.seed, chain), initial=initial)


def hmc_analysis(forecast, obs, op, cfg, n_samples=None):
    """HMC filter step with a Gaussian prior built from the forecast.

    ``n_samples`` defaults to the forecast ensemble size.
    """
    ens = as_ensemble(forecast)
    n_samples = ens.shape[0] if n_samples is None else int(n_samples)
    t0 = time.perf_counter()
    xb = ens.mean(axis=0)
    if cfg.full_covariance:
        cov = ensemble_covariance(ens).data.copy()
        di = np.diag_indices_from(cov)
        cov[di] = np.maximum(cov[di], cfg.variance_floor)
        prior = CovarianceEstimate("full", cov)
    else:
        prior = CovarianceEstimate(
            "diagonal", np.maximum(ensemble_covariance(ens, True).data, cfg.variance_floor))
    potential = GaussianPotential(xb, prior, obs, op)
    mass = build_mass_matrix(ens, variance_floor=cfg.variance_floor)
    samples, stats = run_chain(potential, mass, cfg.trajectory,
                               _chain_config(cfg, xb, 0), n_samples)
    return CycleResult(samples, ens, None, [stats],
                       {"sampling": time.perf_counter() - t0}, [n_samples])


def _fit_mixture(ens, cfg):
    return select_model(ens, cfg.n_c_range, criterion=cfg.criterion,
                        min_members=cfg.min_members, seed=cfg.seed,
                        diagonal_only=cfg.diagonal_gmm, max_iter=cfg.em_max_iter,
                        rel_tol=cfg.em_rel_tol, var_floor=cfg.variance_floor)


def _fit_or_fallback(ens, obs, op, cfg, fallback_cfg, n_samples):
    """``(report, elapsed)`` for a multi-component fit, else ``(report, CycleResult)``."""
    t0 = time.perf_counter()
    try:
        report = _fit_mixture(ens, cfg)
    except FitFailureError as exc:
        log.warning("mixture fit failed (%s); using the Gaussian prior", exc)
        warnings.warn(f"mixture fit failed ({exc}); using the Gaussian prior", RuntimeWarning)
        result = hmc_analysis(ens, obs, op, fallback_cfg, n_samples)
        result.timings["gmm_fit"] = time.perf_counter() - t0
        return None, result
    elapsed = time.perf_counter() - t0
    if report.selected == 1:
        result = hmc_analysis(ens, obs, op, fallback_cfg, n_samples)
        result.gmm_report = report
        result.timings["gmm_fit"] = elapsed
        return report, result
    return report, elapsed


def clhmc_analysis(forecast, obs, op, cfg, n_samples=None):
    """Cluster HMC step: mixture prior, one chain started per ``init_policy``."""
    ens = as_ensemble(forecast)
    n_samples = ens.shape[0] if n_samples is None else int(n_samples)
    report, out = _fit_or_fallback(ens, obs, op, cfg, cfg, n_samples)
    if isinstance(out, CycleResult):
        return out
    t0 = time.perf_counter()
    gmm = report.params
    potential = MixturePotential(gmm, obs, op)
    mass = build_mass_matrix(ens, variance_floor=cfg.variance_floor)
    x0 = init_chain_position(ens, gmm, cfg.init_policy, obs, op)
    samples, stats = run_chain(potential, mass, cfg.trajectory,
                               _chain_config(cfg, x0, 0), n_samples)
    return CycleResult(samples, ens, report, [stats],
                       {"gmm_fit": out, "sampling": time.perf_counter() - t0}, [n_samples])


def mc_clhmc_sample(gmm, obs, op, masses, trajectory, mixing_steps, n_samples, seed,
                    executor=None):
    """Multi-chain sampling of the mixture posterior.

    Chain ``i`` starts at ``gmm.means[i]`` with mass ``masses[i]``, has no
    burn-in, draws from the stream ``(seed, i)`` and contributes its share
    of ``n_samples`` from :func:`allocate_chain_sizes`. Returns
    ``(samples, stats, counts)`` with samples stacked in component order.
    """
    potential = MixturePotential(gmm, obs, op)
    counts = allocate_chain_sizes(gmm, obs, op, n_samples)

    def chain(i):
        cfg = ChainConfig(burn_in=0, mixing_steps=mixing_steps,
                          seed=make_rng(seed, i), initial=gmm.means[i].copy())
        return run_chain(potential, masses[i], trajectory, cfg, int(counts[i]))

    active = [i for i in range(gmm.n_components) if counts[i] > 0]
    if executor is None:
        results = [chain(i) for i in active]
    else:
        results = list(executor.map(chain, active))
    samples = np.vstack([r[0] for r in results])
    return samples, [r[1] for r in results], [int(c) for c in counts]


def mc_clhmc_analysis(forecast, obs, op, cfg, executor=None, n_samples=None):
    """Multi-chain cluster HMC step.

    Every chain targets the full mixture posterior; chain ``i`` starts at the
    mean of component ``i`` with a mass matrix from that component's members
    and no burn-in. With one selected component this is the HMC step with
    burn-in waived.
    """
    ens = as_ensemble(forecast)
    n_samples = ens.shape[0] if n_samples is None else int(n_samples)
    single = replace(cfg, burn_in=0)
    report, out = _fit_or_fallback(ens, obs, op, cfg, single, n_samples)
    if isinstance(out, CycleResult):
        return out
    t0 = time.perf_counter()
    gmm = report.params
    n_c = gmm.n_components
    labels = report.selected_fit.responsibilities.hard_labels()
    masses = chain_masses(ens, labels, n_c, cfg)
    traj = cfg.trajectory
    if cfg.scale_step_by_components:
        traj = TrajectoryParams(traj.h / n_c, traj.m, traj.integrator)
    samples, stats, counts = mc_clhmc_sample(gmm, obs, op, masses, traj, cfg.mixing_steps,
                                             n_samples, cfg.seed, executor)
    return CycleResult(samples, ens, report, stats,
                       {"gmm_fit": out, "sampling": time.perf_counter() - t0}, counts)


def _regularized_solve(S, rhs):
    try:
        c = cho_factor(S)
        if np.all(np.isfinite(c[0])):
            return cho_solve(c, rhs)
    except LinAlgError:
        pass
    lam = 1e-10 * max(np.trace(S) / S.shape[0], 1e-300)
    warnings.warn("innovation covariance is singular; regularizing", RuntimeWarning)
    return np.linalg.lstsq(S + lam * np.eye(S.shape[0]), rhs, rcond=None)[0]


def denkf_analysis(forecast, obs, op, cfg):
    """Deterministic EnKF step with Schur-product localization and inflation."""
    if not getattr(op, "linear", False):
        raise InvalidInputError("DEnKF needs a linear observation operator")
    ens = as_ensemble(forecast)
    t0 = time.perf_counter()
    n_ens, n_var = ens.shape
    xf = ens.mean(axis=0)
    Af = anomalies(ens)
    HAf = op.apply_many(ens) - op.apply(xf)
    radius = cfg.localization_radius
    localize = radius is not None and np.isfinite(radius)
    if isinstance(op, IndexObservation) or hasattr(op, "indices"):
        idx = np.asarray(op.indices)
        BHt = Af.T @ HAf / (n_ens - 1)
        HBHt = HAf.T @ HAf / (n_ens - 1)
        if localize:
            BHt *= localization_matrix(n_var, cfg.distance_fn, radius, cols=idx)
            HBHt *= localization_matrix(n_var, cfg.distance_fn, radius, rows=idx, cols=idx)
    else:
        B = Af.T @ Af / (n_ens - 1)
        if localize:
            B *= localization_matrix(n_var, cfg.distance_fn, radius)
        H = op.matrix()
        BHt = B @ H.T
        HBHt = H @ BHt
    S = HBHt + np.diag(obs.error_variances)
    # K^T = S^-1 (B H^T)^T, S symmetric
    Kt = _regularized_solve(S, BHt.T)
    xa = xf + (obs.values - op.apply(xf)) @ Kt
    Aa = Af - 0.5 * HAf @ Kt
    Aa *= cfg.inflation
    return CycleResult(xa + Aa, ens, None, [], {"analysis": time.perf_counter() - t0})


ANALYSES = {
    "HMC": hmc_analysis,
    "ClHMC": clhmc_analysis,
    "MC_ClHMC": mc_clhmc_analysis,
    "DEnKF": denkf_analysis,
}


def analysis_step(forecast, obs, op, cfg, executor=None):
    """Dispatch to the analysis scheme named by ``cfg.kind``."""
    if not isinstance(obs, Observation):
        raise InvalidInputError("obs must be an Observation")
    if cfg.kind == "MC_ClHMC":
        return mc_clhmc_analysis(forecast, obs, op, cfg, executor=executor)
    return ANALYSES[cfg.kind](forecast, obs, op, cfg)
