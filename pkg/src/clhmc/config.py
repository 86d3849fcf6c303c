"""Experiment configuration: loading, defaults, schema validation.

Configs are TOML or JSON documents. User values are merged over per-model
defaults and the result is validated against ``config_schema.json``; unknown
keys are rejected. Trajectory settings left unspecified follow the filter
kind and the observation operator.
"""

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .filters import FilterConfig
from .hmc import TrajectoryParams

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

STATIC_1D_COMPONENTS = [
    [0.2, -2.4, 0.05],
    [0.1, -1.0, 0.07],
    [0.1, 0.0, 0.02],
    [0.3, 1.0, 0.06],
    [0.3, 2.4, 0.1],
]

QG_DEFAULTS = {
    "model": "qg",
    "seed": 0,
    "n_ens": 20,
    "cycles": 50,
    "obs_interval": 10,
    "spinup_steps": 4000,
    "ensemble_spacing": 50,
    "save_ensembles": "final",
    "rank_stride": 16,
    "qq_radius": 12.0,
    "threads": 1,
    "grid": {"nx": 65, "ny": 65},
    "qg": {"F": 1600.0, "eps": 1.0e-5, "A": 2.0e-12, "dt": 1.25, "beta_sign": 1.0},
    "observations": {"kind": "linear", "m_obs": 300, "error_variance": 4.0,
                     "offset_per_cycle": True},
    "filter": {
        "kind": "MC_ClHMC",
        "integrator": "three_stage",
        "mixing_steps": 15,
        "init_policy": "ensemble_mean",
        "full_covariance": False,
        "criterion": "aic",
        "n_c_range": [1, 2, 3, 4, 5],
        "min_members": 5,
        "diagonal_gmm": True,
        "em_max_iter": 200,
        "em_rel_tol": 1e-6,
        "mass_policy": "local",
        "variance_floor": 1e-2,
        "localization_radius": 12.0,
        "inflation": 1.06,
    },
}

STATIC_1D_DEFAULTS = {
    "model": "static_1d",
    "seed": 0,
    "threads": 1,
    "filter": {
        "h": 0.05,
        "m": 20,
        "integrator": "verlet",
        "burn_in": 0,
        "mixing_steps": 15,
        "init_policy": "ensemble_mean",
        "criterion": "aic",
        "n_c_range": [1, 2, 3, 4, 5, 6],
        "min_members": 5,
        "diagonal_gmm": True,
        "em_max_iter": 200,
        "em_rel_tol": 1e-6,
        "mass_policy": "global",
        "variance_blend": 0.0,
        "scale_step_by_components": False,
        "variance_floor": 1e-10,
    },
    "static_1d": {
        "components": STATIC_1D_COMPONENTS,
        "prior": "fitted",
        "prior_members": 100,
        "n_samples": 1000,
        "observation": -0.06858,
        "error_variance": 1.2,
        "samplers": ["ClHMC", "MC_ClHMC"],
        "grid_points": 2001,
        "hist_bins": 61,
        "hist_range": [-3.5, 3.5],
    },
}

# (h, m) by filter family and observation kind
QG_TRAJECTORIES = {
    ("single", "linear"): (0.075, 25),
    ("single", "wind"): (0.015, 25),
    ("multi", "linear"): (0.05, 15),
    ("multi", "wind"): (0.0075, 15),
}


def load_schema():
    text = resources.files("clhmc").joinpath("config_schema.json").read_text()
    return json.loads(text)


def read_config_file(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def validate(cfg):
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(user_cfg, seed=None, out_dir=None, threads=None):
    """Validate ``user_cfg``, merge it over defaults and fill derived settings."""
    if not isinstance(user_cfg, dict):
        raise ConfigError("config must be a mapping")
    validate(user_cfg)
    model = user_cfg["model"]
    cfg = _merge(QG_DEFAULTS if model == "qg" else STATIC_1D_DEFAULTS, user_cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    if threads is not None:
        cfg["threads"] = int(threads)
    if model == "qg":
        f = cfg["filter"]
        multi = f["kind"] == "MC_ClHMC"
        h, m = QG_TRAJECTORIES[("multi" if multi else "single", cfg["observations"]["kind"])]
        f.setdefault("h", h)
        f.setdefault("m", m)
        f.setdefault("burn_in", 0 if multi else 50)
        f.setdefault("variance_blend", 5.0 if multi else 0.0)
        f.setdefault("scale_step_by_components", multi)
        if f["kind"] == "DEnKF" and cfg["observations"]["kind"] != "linear":
            raise ConfigError("DEnKF needs linear observations")
        if cfg["observations"]["m_obs"] > cfg["grid"]["nx"] * cfg["grid"]["ny"]:
            raise ConfigError("m_obs exceeds the state dimension")
    else:
        lo, hi = cfg["static_1d"]["hist_range"]
        if not lo < hi:
            raise ConfigError("hist_range must be increasing")
    validate(cfg)
    return cfg


def load_config(path, **overrides):
    return resolve(read_config_file(path), **overrides)


def filter_config(cfg, kind=None, seed=None, distance_fn=None):
    """Build a :class:`FilterConfig` from the resolved ``filter`` section."""
    f = cfg["filter"]
    kind = kind or f.get("kind", "HMC")
    radius = f.get("localization_radius")
    kwargs = dict(
        kind=kind,
        trajectory=TrajectoryParams(f["h"], f["m"], f["integrator"]),
        burn_in=f["burn_in"],
        mixing_steps=f["mixing_steps"],
        seed=cfg["seed"] if seed is None else seed,
        init_policy=f["init_policy"],
        full_covariance=f.get("full_covariance", False),
        criterion=f["criterion"],
        n_c_range=tuple(f["n_c_range"]),
        min_members=f["min_members"],
        diagonal_gmm=f["diagonal_gmm"],
        em_max_iter=f["em_max_iter"],
        em_rel_tol=f["em_rel_tol"],
        mass_policy=f.get("mass_policy", "local"),
        variance_blend=f["variance_blend"],
        scale_step_by_components=f["scale_step_by_components"],
        variance_floor=f["variance_floor"],
        localization_radius=float("inf") if radius is None else radius,
        inflation=f.get("inflation", 1.0),
    )
    if distance_fn is not None:
        kwargs["distance_fn"] = distance_fn
    return FilterConfig(**kwargs)
