"""Command-line entry point.

Exit status: 0 on success, 1 for configuration or usage errors, 2 when a
run fails.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from .config import load_config, read_config_file, resolve
from .ensemble import Observation, read_ensemble_csv
from .errors import ClhmcError, ConfigError
from .filters import mc_clhmc_sample
from .gmm import GmmParams, gmm_joint_moments, load_gmm_json, save_gmm_json, select_model
from .harness import (
    RunFailure,
    bin_probabilities,
    mode_coverage,
    posterior_modes,
    run_experiment,
    total_variation,
)
from .hmc import ChainConfig, MassMatrix, TrajectoryParams, make_rng, run_chain
from .potentials import GaussianPotential, IndexObservation, MixturePotential
from .qg import read_qg1

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("clhmc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--threads", type=int, default=None, help="worker threads")

    p = _Parser(prog="clhmc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"clhmc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", parents=[common], help="run an experiment from a config file")
    r.add_argument("config")

    f = sub.add_parser("fit-gmm", parents=[common], help="fit a Gaussian mixture to an ensemble CSV")
    f.add_argument("csv")
    f.add_argument("--criterion", choices=["aic", "bic"], default="aic")
    f.add_argument("--max-components", type=int, default=6)
    f.add_argument("--min-members", type=int, default=5)
    f.add_argument("--full", action="store_true", help="full component covariances")

    s = sub.add_parser("sample", parents=[common], help="run HMC chains on a potential spec")
    s.add_argument("spec", help="JSON file with prior, observation and chain settings")

    d = sub.add_parser("diag", parents=[common], help="recompute metrics from a run directory")
    d.add_argument("run_dir")

    v = sub.add_parser("validate-config", parents=[common], help="check a config file")
    v.add_argument("config")
    return p


def cmd_run(args):
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out, threads=args.threads)
    manifest = run_experiment(cfg)
    print(f"{manifest.status}: outputs in {manifest.out_dir}")


def cmd_validate(args):
    resolve(read_config_file(args.config))
    print(f"{args.config}: ok")


def cmd_fit_gmm(args):
    data = read_ensemble_csv(args.csv)
    report = select_model(data, range(1, args.max_components + 1), args.criterion,
                          args.min_members, seed=args.seed or 0, diagonal_only=not args.full)
    out = Path(args.out or Path(args.csv).with_suffix(".gmm.json"))
    save_gmm_json(out, report.params)
    values = ", ".join(f"{k}: {v:.3f}" for k, v in sorted(report.values.items()))
    print(f"selected {report.selected} components ({report.criterion} {values}); wrote {out}")


def _spec_prior(prior, base):
    kind = prior.get("type")
    if kind == "gmm":
        if "path" in prior:
            return load_gmm_json(base / prior["path"])
        return GmmParams.from_dict(prior["params"])
    if kind == "gaussian":
        return np.asarray(prior["mean"], dtype=float), np.asarray(prior["variances"], dtype=float)
    raise ConfigError("prior.type must be 'gmm' or 'gaussian'")


def cmd_sample(args):
    spec_path = Path(args.spec)
    try:
        spec = json.loads(spec_path.read_text())
        prior = _spec_prior(spec["prior"], spec_path.parent)
        chain = spec["chain"]
        traj = TrajectoryParams(chain["h"], chain["m"], chain.get("integrator", "verlet"))
        n_samples = int(chain["n_samples"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad sample spec {spec_path}: {exc}") from exc
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    n_var = prior.dim if isinstance(prior, GmmParams) else prior[0].size
    obs = op = None
    if "observation" in spec:
        o = spec["observation"]
        obs = Observation(o["values"], o.get("error_variance", 1.0))
        op = IndexObservation(o.get("indices", list(range(obs.size))), n_var)
    out = Path(args.out or "sample_out")
    out.mkdir(parents=True, exist_ok=True)

    if isinstance(prior, GmmParams):
        potential = MixturePotential(prior, obs, op)
        _, cov = gmm_joint_moments(prior, diagonal_only=True)
        glob = MassMatrix(chain.get("mass", 1.0 / cov.data))
        x0 = np.asarray(chain.get("initial", prior.means[np.argmax(prior.weights)]), dtype=float)
    else:
        potential = GaussianPotential(prior[0], prior[1], obs, op)
        glob = MassMatrix(chain.get("mass", 1.0 / prior[1]))
        x0 = np.asarray(chain.get("initial", prior[0]), dtype=float)

    if spec.get("sampler", "single") == "multi":
        if not isinstance(prior, GmmParams) or obs is None:
            raise ConfigError("multi-chain sampling needs a mixture prior and an observation")
        masses = [MassMatrix(1.0 / v) for v in prior.variances]
        samples, stats, alloc = mc_clhmc_sample(prior, obs, op, masses, traj,
                                                int(chain.get("mixing_steps", 0)), n_samples, seed)
    else:
        cfg = ChainConfig(int(chain.get("burn_in", 0)), int(chain.get("mixing_steps", 0)),
                          make_rng(seed, 0), x0)
        samples, st = run_chain(potential, glob, traj, cfg, n_samples)
        stats, alloc = [st], [n_samples]
    np.savetxt(out / "samples.csv", samples, delimiter=",", fmt="%.17g")
    diag.write_json(out / "chain_stats.json",
                    {"allocation": alloc, "chains": [s.to_dict() for s in stats]})
    rate = sum(s.acceptances for s in stats) / max(1, sum(s.proposals for s in stats))
    print(f"{samples.shape[0]} samples, acceptance {rate:.3f}; wrote {out}")


def _diag_qg(run_dir, manifest, out):
    cfg = manifest["config"]
    rows, ranks = [], []
    for entry in manifest["cycles"]:
        if "analysis" not in entry:
            continue
        truth, _ = read_qg1(run_dir / entry["truth"])
        truth = truth.ravel()
        fc = read_ensemble_csv(run_dir / entry["forecast"])
        an = read_ensemble_csv(run_dir / entry["analysis"])
        acc = float("nan")
        if "chains" in entry:
            chains = json.loads((run_dir / entry["chains"]).read_text())["chains"]
            props = sum(c["proposals"] for c in chains)
            acc = sum(c["acceptances"] for c in chains) / props if props else acc
        rows.append((entry["cycle"], diag.rmse(fc.mean(axis=0), truth),
                     diag.rmse(an.mean(axis=0), truth), acc))
        ranks.append(diag.rank_of_truth(an, truth, cfg["rank_stride"],
                                        seed=[cfg["seed"], 4, entry["cycle"]]))
    diag.write_metrics_csv(out / "diag_metrics.csv", rows)
    hist = diag.accumulate_rank_histogram(ranks, cfg["n_ens"], cfg["rank_stride"])
    diag.write_json(out / "diag_rank_histogram.json", hist.to_dict())
    print(f"recomputed {len(rows)} cycles; wrote {out / 'diag_metrics.csv'}")


def _diag_static(run_dir, manifest, out):
    s1 = manifest["config"]["static_1d"]
    table = np.loadtxt(run_dir / "posterior_grid.csv", delimiter=",", skiprows=1)
    grid, post = table[:, 0], table[:, 3]
    edges = np.linspace(s1["hist_range"][0], s1["hist_range"][1], s1["hist_bins"] + 1)
    probs = bin_probabilities(grid, post, edges)
    bounds, masses = posterior_modes(grid, post)
    summary = {"mode_masses": masses.tolist(), "samplers": {}}
    for sampler in s1["samplers"]:
        samples = read_ensemble_csv(run_dir / f"samples_{sampler.lower()}.csv")[:, 0]
        summary["samplers"][sampler] = {
            "total_variation": total_variation(samples, edges, probs),
            "mode_fractions": mode_coverage(samples, bounds).tolist(),
        }
    diag.write_json(out / "diag_summary.json", summary)
    for name, vals in summary["samplers"].items():
        print(f"{name}: total variation {vals['total_variation']:.4f}")


def cmd_diag(args):
    run_dir = Path(args.run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{run_dir}: no readable manifest ({exc})") from exc
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    if manifest["config"]["model"] == "qg":
        _diag_qg(run_dir, manifest, out)
    else:
        _diag_static(run_dir, manifest, out)


COMMANDS = {
    "run": cmd_run,
    "fit-gmm": cmd_fit_gmm,
    "sample": cmd_sample,
    "diag": cmd_diag,
    "validate-config": cmd_validate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ClhmcError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
