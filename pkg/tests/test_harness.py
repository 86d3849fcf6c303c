import json
import os

import numpy as np
import pytest

from clhmc.config import resolve
from clhmc.diagnostics import read_metrics_csv
from clhmc.ensemble import read_ensemble_csv
from clhmc.harness import (
    RunFailure,
    bin_probabilities,
    derived_seed,
    gmm_from_components,
    grid_posterior,
    load_manifest,
    make_operator,
    mode_coverage,
    posterior_modes,
    qg_setup,
    run_experiment,
    run_static_1d,
    run_twin_experiment,
    synthesize_observation,
    total_variation,
)
from clhmc.config import STATIC_1D_COMPONENTS

from oracles import mixture_pdf_naive


def small_qg(out, kind="DEnKF", **extra):
    user = {
        "model": "qg", "seed": 3, "out_dir": str(out), "n_ens": 6, "cycles": 2,
        "obs_interval": 2, "spinup_steps": 20, "ensemble_spacing": 3,
        "grid": {"nx": 13, "ny": 13},
        "observations": {"m_obs": 20},
        "filter": {"kind": kind, "localization_radius": 3.0, "n_c_range": [1, 2]},
    }
    if kind != "DEnKF":
        user["filter"].update({"h": 0.02, "m": 4, "mixing_steps": 1})
        user["filter"].pop("localization_radius")
        if kind in ("HMC", "ClHMC"):
            user["filter"]["burn_in"] = 2
    user.update(extra)
    return resolve(user)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes()
            for p in sorted(path.rglob("*")) if p.is_file()}


# seeds and setup

def test_derived_seed_is_stable():
    assert derived_seed(1, 2) == derived_seed(1, 2)
    assert derived_seed(1, 2) != derived_seed(2, 1)
    assert 0 <= derived_seed(5) < 2**32


def test_qg_setup_and_observations(tmp_path):
    cfg = small_qg(tmp_path)
    model, truth, ens = qg_setup(cfg)
    assert ens.shape == (6, 169) and truth.shape == (169,)
    assert np.all(np.isfinite(ens))
    assert len({row.tobytes() for row in ens}) == 6
    op = make_operator(cfg, model.grid, 1)
    obs = synthesize_observation(truth, op, 4.0, 3, 1)
    again = synthesize_observation(truth, op, 4.0, 3, 1)
    np.testing.assert_array_equal(obs.values, again.values)
    assert np.all(obs.error_variances == 4.0)


# twin experiment

def test_zero_cycles_writes_manifest_only(tmp_path):
    m = run_twin_experiment(small_qg(tmp_path, cycles=0))
    assert m.status == "complete" and m.cycles == []
    assert read_metrics_csv(tmp_path / "metrics.csv") == []
    manifest = load_manifest(tmp_path)
    assert manifest["status"] == "complete"
    resolve(manifest["config"])


@pytest.mark.parametrize("kind", ["DEnKF", "HMC", "ClHMC", "MC_ClHMC", "none"])
def test_small_runs_complete(tmp_path, kind):
    m = run_twin_experiment(small_qg(tmp_path, kind))
    assert m.status == "complete"
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r["cycle"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["rmse_analysis"]) for r in rows)
    final = read_ensemble_csv(tmp_path / "ensembles" / "final_analysis.csv")
    assert final.shape == (6, 169)
    for name in ("freerun.csv", "rank_histogram.json", "qq.json", "timings.json"):
        assert (tmp_path / name).exists()
    hist = json.loads((tmp_path / "rank_histogram.json").read_text())
    assert sum(hist["bins"]) == 2 * len(range(0, 169, 16))


def test_identical_seeds_give_identical_trees(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cfg_a = small_qg(a, "MC_ClHMC", threads=2)
    cfg_b = small_qg(b, "MC_ClHMC")
    run_twin_experiment(cfg_a)
    run_twin_experiment(cfg_b)
    ta, tb = tree(a), tree(b)
    ta.pop("timings.json")
    tb.pop("timings.json")
    manifest_a = json.loads(ta.pop("manifest.json"))
    manifest_b = json.loads(tb.pop("manifest.json"))
    assert ta == tb
    for m in (manifest_a, manifest_b):
        m["config"].pop("threads")
    assert manifest_a == manifest_b


def test_run_stays_in_output_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run_twin_experiment(small_qg(tmp_path / "out", cycles=1))
    assert sorted(os.listdir(tmp_path)) == ["out"]


def test_failure_is_recorded(tmp_path):
    cfg = small_qg(tmp_path, qg={"dt": 1e6})
    with pytest.raises(RunFailure) as info:
        run_experiment(cfg)
    manifest = load_manifest(tmp_path)
    assert manifest["status"] == "failed"
    assert manifest["failure"]["stage"] == "setup"
    assert manifest["failure"]["cycle"] == 0
    assert info.value.manifest.status == "failed"


# static one-dimensional problem

def test_grid_posterior_against_naive_oracle():
    gmm = gmm_from_components(STATIC_1D_COMPONENTS)
    grid = np.linspace(-3.5, 3.5, 2001)
    prior, like, post = grid_posterior(gmm, -0.06858, 1.2, grid)
    for i in (0, 500, 1000, 1700):
        ref = mixture_pdf_naive(grid[i], gmm.weights, gmm.means[:, 0], gmm.covariances[:, 0])
        assert prior[i] == pytest.approx(float(ref), rel=1e-12)
    assert np.trapezoid(post, grid) == pytest.approx(1.0)
    probs = bin_probabilities(grid, post, np.linspace(-3.5, 3.5, 62))
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    bounds, masses = posterior_modes(grid, post)
    assert len(masses) == 5 and masses.sum() == pytest.approx(1.0, abs=1e-12)


def test_total_variation_and_coverage():
    edges = np.array([0.0, 1.0, 2.0])
    assert total_variation(np.array([0.5, 1.5]), edges, np.array([0.5, 0.5])) == 0.0
    assert total_variation(np.array([0.5, 0.5]), edges, np.array([0.5, 0.5])) == 0.5
    assert total_variation(np.array([5.0, 5.0]), edges, np.array([0.5, 0.5])) == 1.0
    np.testing.assert_allclose(mode_coverage([-5.0, 0.5, 0.7, 9.0], [-1.0, 0.0, 1.0, 2.0]),
                               [0.25, 0.5, 0.25])


def test_static_run_outputs(tmp_path):
    cfg = resolve({"model": "static_1d", "out_dir": str(tmp_path),
                   "static_1d": {"n_samples": 200}})
    m = run_static_1d(cfg)
    assert m.status == "complete"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["samplers"]) == {"ClHMC", "MC_ClHMC"}
    assert sum(summary["samplers"]["MC_ClHMC"]["allocation"]) == 200
    header = (tmp_path / "posterior_grid.csv").read_text().splitlines()[0]
    assert header == "x,prior,likelihood,posterior,true_prior,true_posterior"
    assert read_ensemble_csv(tmp_path / "samples_mc_clhmc.csv").shape == (200, 1)
    hist = json.loads((tmp_path / "histograms.json").read_text())
    assert len(hist["edges"]) == 62 and sum(hist["ClHMC"]) <= 200


def test_static_run_with_truth_prior(tmp_path):
    cfg = resolve({"model": "static_1d", "out_dir": str(tmp_path),
                   "static_1d": {"n_samples": 100, "prior": "truth", "samplers": ["HMC", "MC_ClHMC"]}})
    run_static_1d(cfg)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["prior_components"] == 5
    assert len(summary["samplers"]["MC_ClHMC"]["allocation"]) == 5
