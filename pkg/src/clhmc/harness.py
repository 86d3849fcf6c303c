"""Experiment drivers: the QG twin experiment and the static 1-D mixture problem.

Every random stream is derived from the master seed:

* ``[seed, 1]`` initial-ensemble selection and the 1-D prior sample
* ``[seed, 2, k]`` observation noise at cycle ``k``
* ``[seed, k]`` observation-network offset at cycle ``k``
* ``[seed, 3, k]`` the filter seed at cycle ``k`` (chains use ``(filter seed, i)``)
* ``[seed, 4, k]`` rank-histogram tie breaking at cycle ``k``

All artifacts land under the configured output directory. ``timings.json``
holds wall-clock measurements and is the only file that differs between
two runs with the same configuration.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import argrelmin

from . import __version__
from . import diagnostics as diag
from .config import filter_config
from .ensemble import Observation, grid_distance_fn, write_ensemble_csv
from .errors import ClhmcError
from .filters import (
    analysis_step,
    build_mass_matrix,
    chain_masses,
    forecast,
    hmc_analysis,
    init_chain_position,
    mc_clhmc_sample,
)
from .gmm import GmmParams, e_step, sample_gmm, save_gmm_json, select_model
from .hmc import ChainConfig, TrajectoryParams, make_rng, run_chain
from .potentials import IdentityOperator, MixturePotential
from .qg import QgGrid, QgModel, QgParams, linear_obs_operator, wind_magnitude_operator, write_qg1

log = logging.getLogger(__name__)


class RunFailure(ClhmcError):
    """An experiment aborted; ``manifest`` records where."""

    def __init__(self, message, manifest):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    cycles: list = field(default_factory=list)
    status: str = "running"
    failure: dict = None
    timings: dict = field(default_factory=dict)
    out_dir: Path = None

    def to_dict(self):
        out = {
            "config": self.config,
            "version": self.version,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "cycles": self.cycles,
            "status": self.status,
            "timings_file": "timings.json",
        }
        if self.failure is not None:
            out["failure"] = self.failure
        return out

    def write(self):
        diag.write_json(self.out_dir / "manifest.json", self.to_dict())
        diag.write_json(self.out_dir / "timings.json", self.timings)


def derived_seed(*keys):
    """A 32-bit integer seed from the stream identified by ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _portable_config(cfg):
    return {k: v for k, v in cfg.items() if k != "out_dir"}


def _prepare_out(cfg):
    out = Path(cfg.get("out_dir") or "runs/default")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _executor(threads):
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext(None)


# ----------------------------------------------------------------------------
# QG twin experiment
# ----------------------------------------------------------------------------

def qg_setup(cfg):
    """Model, truth initial state and initial ensemble for a QG experiment.

    The truth starts from rest and is spun up for ``spinup_steps``; the
    ensemble is taken from the continuation of that run, one state every
    ``ensemble_spacing`` steps, assigned to members in a seeded random order.
    """
    g = cfg["grid"]
    model = QgModel(QgGrid(g["nx"], g["ny"]), QgParams(**cfg["qg"]))
    truth = model.advance_psi(np.zeros(model.n_var), cfg["spinup_steps"])
    states = []
    x = truth
    for _ in range(cfg["n_ens"]):
        x = model.advance_psi(x, cfg["ensemble_spacing"])
        states.append(x)
    order = np.random.default_rng([cfg["seed"], 1]).permutation(cfg["n_ens"])
    return model, truth, np.array(states)[order]


def make_operator(cfg, grid, cycle):
    o = cfg["observations"]
    builder = linear_obs_operator if o["kind"] == "linear" else wind_magnitude_operator
    return builder(grid, o["m_obs"], seed=cfg["seed"], offset_per_cycle=o["offset_per_cycle"],
                   cycle=cycle)


def synthesize_observation(truth, op, error_variance, seed, cycle):
    rng = np.random.default_rng([seed, 2, cycle])
    clean = op.apply(truth)
    return Observation(clean + np.sqrt(error_variance) * rng.standard_normal(clean.size),
                       error_variance)


def run_twin_experiment(cfg):
    """Run a QG twin experiment described by the resolved config ``cfg``.

    Writes ``metrics.csv``, ``freerun.csv``, ``rank_histogram.json``,
    ``qq.json``, per-cycle GMM and chain-statistics JSON, truth checkpoints,
    ensembles per ``save_ensembles``, ``manifest.json`` and ``timings.json``.
    """
    out = _prepare_out(cfg)
    manifest = RunManifest(_portable_config(cfg), out_dir=out)
    seed = cfg["seed"]
    manifest.seeds = {
        "master": seed,
        "initial_ensemble": [seed, 1],
        "observation_noise": "[seed, 2, cycle]",
        "observation_offset": "[seed, cycle]",
        "filter": "[seed, 3, cycle]",
        "rank_ties": "[seed, 4, cycle]",
    }
    t_start = time.perf_counter()
    stage, cycle = "setup", 0
    try:
        model, truth, ens = qg_setup(cfg)
        manifest.timings["setup"] = time.perf_counter() - t_start
        free = ens.copy()
        grid = model.grid
        kind = cfg["filter"]["kind"]
        distance = grid_distance_fn(grid.nx, grid.ny)
        interval = cfg["obs_interval"]
        metrics, free_rows, ranks = [], [], []
        ens_dir = out / "ensembles"
        (out / "cycles").mkdir(exist_ok=True)
        write_qg1(out / "cycles" / "truth_0000.qg1", truth, grid)
        manifest.artifacts["truth_initial"] = "cycles/truth_0000.qg1"
        threads = cfg["threads"]
        with _executor(threads) as pool:
            for cycle in range(1, cfg["cycles"] + 1):
                t0 = time.perf_counter()
                stage = "forecast"
                t_from, t_to = (cycle - 1) * interval, cycle * interval
                truth = model.advance(truth, t_from, t_to)
                fc = forecast(model, ens, t_from, t_to, executor=pool, n_chunks=threads)
                free = forecast(model, free, t_from, t_to, executor=pool, n_chunks=threads)
                stage = "observation"
                op = make_operator(cfg, grid, cycle)
                obs = synthesize_observation(truth, op, cfg["observations"]["error_variance"],
                                             seed, cycle)
                stage = "analysis"
                if kind == "none":
                    ens, result = fc, None
                else:
                    fcfg = filter_config(cfg, seed=derived_seed(seed, 3, cycle),
                                         distance_fn=distance)
                    result = analysis_step(fc, obs, op, fcfg, executor=pool)
                    ens = result.analysis
                stage = "diagnostics"
                acc = result.acceptance_rate if result is not None else float("nan")
                metrics.append((cycle, diag.rmse(fc.mean(axis=0), truth),
                                diag.rmse(ens.mean(axis=0), truth), acc))
                free_rows.append((cycle, diag.rmse(free.mean(axis=0), truth)))
                ranks.append(diag.rank_of_truth(ens, truth, cfg["rank_stride"],
                                                seed=[seed, 4, cycle]))
                stage = "output"
                manifest.cycles.append(
                    _write_cycle(out, cycle, truth, fc, ens, result, cfg, grid))
                manifest.timings[f"cycle_{cycle:04d}"] = {
                    "total": time.perf_counter() - t0,
                    **({} if result is None else result.timings),
                }
        stage, cycle = "finalize", cfg["cycles"]
        diag.write_metrics_csv(out / "metrics.csv", metrics)
        with open(out / "freerun.csv", "w") as fh:
            fh.write("cycle,rmse_free\n")
            for c, r in free_rows:
                fh.write(f"{c},{r!r}\n")
        hist = diag.accumulate_rank_histogram(ranks, cfg["n_ens"], cfg["rank_stride"])
        diag.write_json(out / "rank_histogram.json", hist.to_dict())
        qq = diag.chi_square_qq(ens, cfg.get("qq_radius"), distance)
        diag.write_json(out / "qq.json", qq.to_dict())
        if cfg["save_ensembles"] != "none":
            ens_dir.mkdir(exist_ok=True)
            write_ensemble_csv(ens_dir / "final_analysis.csv", ens)
        manifest.artifacts.update({
            "metrics": "metrics.csv",
            "freerun": "freerun.csv",
            "rank_histogram": "rank_histogram.json",
            "qq": "qq.json",
        })
        if cfg["save_ensembles"] != "none":
            manifest.artifacts["final_analysis"] = "ensembles/final_analysis.csv"
        manifest.status = "complete"
    except ClhmcError as exc:
        manifest.status = "failed"
        manifest.failure = {"cycle": cycle, "stage": stage, "error": f"{type(exc).__name__}: {exc}"}
        manifest.timings["total"] = time.perf_counter() - t_start
        manifest.write()
        raise RunFailure(f"cycle {cycle}, stage {stage}: {exc}", manifest) from exc
    manifest.timings["total"] = time.perf_counter() - t_start
    manifest.write()
    return manifest


def _write_cycle(out, cycle, truth, fc, ens, result, cfg, grid):
    tag = f"{cycle:04d}"
    entry = {"cycle": cycle, "truth": f"cycles/truth_{tag}.qg1"}
    write_qg1(out / entry["truth"], truth, grid)
    if result is not None and result.gmm_report is not None:
        report = result.gmm_report
        entry["gmm"] = f"cycles/gmm_{tag}.json"
        diag.write_json(out / entry["gmm"], {
            "criterion": report.criterion,
            "values": {str(k): float(v) for k, v in report.values.items()},
            "discarded": report.discarded,
            "selected": report.selected,
            "params": report.params.to_dict(),
        })
    if result is not None and result.chain_stats:
        entry["chains"] = f"cycles/chains_{tag}.json"
        diag.write_json(out / entry["chains"], {
            "allocation": result.allocation,
            "chains": [s.to_dict() for s in result.chain_stats],
        })
    last = cycle == cfg["cycles"]
    if cfg["save_ensembles"] == "all" or (cfg["save_ensembles"] == "final" and last):
        (out / "ensembles").mkdir(exist_ok=True)
        entry["forecast"] = f"ensembles/forecast_{tag}.csv"
        entry["analysis"] = f"ensembles/analysis_{tag}.csv"
        write_ensemble_csv(out / entry["forecast"], fc)
        write_ensemble_csv(out / entry["analysis"], ens)
    return entry


# ----------------------------------------------------------------------------
# static 1-D mixture problem
# ----------------------------------------------------------------------------

def gmm_from_components(components):
    comps = np.asarray(components, dtype=float)
    weights = comps[:, 0] / comps[:, 0].sum()
    return GmmParams(weights, comps[:, 1:2], comps[:, 2:3])


def grid_posterior(gmm, y, error_variance, grid):
    """Prior density, likelihood and normalized posterior on a 1-D grid."""
    x = np.asarray(grid, dtype=float)
    prior = np.zeros_like(x)
    for w, mu, var in zip(gmm.weights, gmm.means[:, 0], gmm.covariances[:, 0]):
        prior += w * np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var)
    like = np.exp(-0.5 * (x - y) ** 2 / error_variance) / np.sqrt(2 * np.pi * error_variance)
    post = prior * like
    post /= np.trapezoid(post, x)
    return prior, like, post


def _cumulative(grid, density):
    steps = 0.5 * (density[1:] + density[:-1]) * np.diff(grid)
    return np.concatenate([[0.0], np.cumsum(steps)])


def bin_probabilities(grid, density, edges):
    """Probability of each histogram bin under a gridded density."""
    return np.diff(np.interp(edges, grid, _cumulative(grid, density)))


def total_variation(samples, edges, probs):
    """Half the L1 distance between the sample histogram and ``probs``.

    Samples outside the histogram range count as unmatched mass.
    """
    samples = np.ravel(samples)
    counts, _ = np.histogram(samples, edges)
    freq = counts / samples.size
    outside = 1.0 - freq.sum()
    return 0.5 * (np.abs(freq - probs).sum() + abs(outside - max(0.0, 1.0 - probs.sum())))


def posterior_modes(grid, density):
    """Basin boundaries (local minima) and the probability of each basin."""
    minima = grid[argrelmin(density)[0]]
    bounds = np.concatenate([[grid[0]], minima, [grid[-1]]])
    cdf = _cumulative(grid, density)
    masses = np.diff(np.interp(bounds, grid, cdf))
    return bounds, masses


def mode_coverage(samples, bounds):
    """Fraction of samples falling in each basin (outer basins are open-ended)."""
    inner = np.asarray(bounds, dtype=float)[1:-1]
    labels = np.searchsorted(inner, np.ravel(samples))
    return np.bincount(labels, minlength=inner.size + 1) / np.size(samples)


def sample_static_posterior(sampler, prior_ens, gmm, obs, op, fcfg, n_samples, executor=None):
    """``(samples, chain_stats, allocation)`` for one sampler on the 1-D problem.

    ``gmm`` is the mixture used as prior for the cluster samplers; members
    of ``prior_ens`` are hard-assigned to its components for local masses.
    """
    if sampler == "HMC" or gmm.n_components == 1:
        res = hmc_analysis(prior_ens, obs, op, fcfg, n_samples)
        return res.analysis, res.chain_stats, res.allocation
    labels = e_step(prior_ens, gmm).hard_labels()
    if sampler == "ClHMC":
        potential = MixturePotential(gmm, obs, op)
        mass = build_mass_matrix(prior_ens, variance_floor=fcfg.variance_floor)
        x0 = init_chain_position(prior_ens, gmm, fcfg.init_policy, obs, op)
        chain = ChainConfig(fcfg.burn_in, fcfg.mixing_steps, make_rng(fcfg.seed, 0), x0)
        samples, stats = run_chain(potential, mass, fcfg.trajectory, chain, n_samples)
        return samples, [stats], [n_samples]
    masses = chain_masses(prior_ens, labels, gmm.n_components, fcfg)
    traj = fcfg.trajectory
    if fcfg.scale_step_by_components:
        traj = TrajectoryParams(traj.h / gmm.n_components, traj.m, traj.integrator)
    return mc_clhmc_sample(gmm, obs, op, masses, traj, fcfg.mixing_steps, n_samples,
                           fcfg.seed, executor)


def run_static_1d(cfg):
    """Sample the 1-D mixture posterior with each configured sampler.

    Writes the prior sample, the fitted mixture and selection table, the
    gridded analytic posterior, per-sampler samples and chain statistics,
    ``histograms.json`` and ``summary.json`` (total variation distance and
    per-mode sample fractions).
    """
    out = _prepare_out(cfg)
    manifest = RunManifest(_portable_config(cfg), out_dir=out)
    s1 = cfg["static_1d"]
    seed = cfg["seed"]
    manifest.seeds = {"master": seed, "prior_sample": [seed, 1], "chains": "(seed, chain)"}
    t_start = time.perf_counter()
    stage = "setup"
    try:
        truth = gmm_from_components(s1["components"])
        prior_ens = sample_gmm(truth, s1["prior_members"], seed=[seed, 1])
        obs = Observation([s1["observation"]], s1["error_variance"])
        op = IdentityOperator(1)
        fcfg = filter_config(cfg, kind="ClHMC")
        stage = "fit"
        report = select_model(prior_ens, fcfg.n_c_range, fcfg.criterion, fcfg.min_members,
                              seed=seed, diagonal_only=True, max_iter=fcfg.em_max_iter,
                              rel_tol=fcfg.em_rel_tol)
        gmm = report.params if s1["prior"] == "fitted" else truth
        write_ensemble_csv(out / "prior.csv", prior_ens)
        save_gmm_json(out / "gmm.json", report.params)
        diag.write_json(out / "model_selection.json", {
            "criterion": report.criterion,
            "values": {str(k): float(v) for k, v in report.values.items()},
            "discarded": report.discarded,
            "selected": report.selected,
        })

        grid = np.linspace(s1["hist_range"][0], s1["hist_range"][1], s1["grid_points"])
        prior_d, like, post = grid_posterior(gmm, s1["observation"], s1["error_variance"], grid)
        true_prior, _, true_post = grid_posterior(truth, s1["observation"],
                                                  s1["error_variance"], grid)
        np.savetxt(out / "posterior_grid.csv",
                   np.column_stack([grid, prior_d, like, post, true_prior, true_post]),
                   delimiter=",", header="x,prior,likelihood,posterior,true_prior,true_posterior",
                   comments="", fmt="%.17g")
        edges = np.linspace(s1["hist_range"][0], s1["hist_range"][1], s1["hist_bins"] + 1)
        probs = bin_probabilities(grid, post, edges)
        bounds, masses = posterior_modes(grid, post)
        histograms = {"edges": edges.tolist(), "posterior_bin_probabilities": probs.tolist()}
        summary = {"prior_components": report.selected if s1["prior"] == "fitted" else truth.n_components,
                   "mode_bounds": bounds.tolist(), "mode_masses": masses.tolist(), "samplers": {}}
        with _executor(cfg["threads"]) as pool:
            for sampler in s1["samplers"]:
                stage = f"sampling:{sampler}"
                t0 = time.perf_counter()
                fk = filter_config(cfg, kind=sampler)
                samples, stats, alloc = sample_static_posterior(
                    sampler, prior_ens, gmm, obs, op, fk, s1["n_samples"], pool)
                manifest.timings[sampler] = time.perf_counter() - t0
                name = sampler.lower()
                write_ensemble_csv(out / f"samples_{name}.csv", samples)
                diag.write_json(out / f"chains_{name}.json", {
                    "allocation": alloc, "chains": [s.to_dict() for s in stats]})
                counts, _ = np.histogram(samples[:, 0], edges)
                histograms[sampler] = counts.tolist()
                summary["samplers"][sampler] = {
                    "total_variation": total_variation(samples[:, 0], edges, probs),
                    "mode_fractions": mode_coverage(samples[:, 0], bounds).tolist(),
                    "allocation": alloc,
                }
                manifest.artifacts[sampler] = f"samples_{name}.csv"
        diag.write_json(out / "histograms.json", histograms)
        diag.write_json(out / "summary.json", summary)
        manifest.artifacts.update({"prior": "prior.csv", "gmm": "gmm.json",
                                   "posterior_grid": "posterior_grid.csv",
                                   "histograms": "histograms.json", "summary": "summary.json"})
        manifest.status = "complete"
    except ClhmcError as exc:
        manifest.status = "failed"
        manifest.failure = {"cycle": 0, "stage": stage, "error": f"{type(exc).__name__}: {exc}"}
        manifest.timings["total"] = time.perf_counter() - t_start
        manifest.write()
        raise RunFailure(f"stage {stage}: {exc}", manifest) from exc
    manifest.timings["total"] = time.perf_counter() - t_start
    manifest.write()
    return manifest


def run_experiment(cfg):
    if cfg["model"] == "qg":
        return run_twin_experiment(cfg)
    return run_static_1d(cfg)


def load_manifest(run_dir):
    with open(Path(run_dir) / "manifest.json") as fh:
        return json.load(fh)
