"""Hamiltonian Monte Carlo: energies, symplectic integrators, chains.

The integrators are symmetric kick-drift compositions. One step of size ``h``
alternates momentum kicks ``p -= b_k h grad J(x)`` with position drifts
``x += a_k h M^{-1} p``, starting and ending with a kick.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailureError, InvalidInputError, TrajectoryDivergenceError

TWO_STAGE_B = 0.193183327503784
THREE_STAGE_B1 = 0.118880109665480
THREE_STAGE_A1 = 0.296195042611266

# (kick coefficients, drift coefficients); len(kicks) == len(drifts) + 1
SCHEMES = {
    "verlet": ((0.5, 0.5), (1.0,)),
    "two_stage": ((TWO_STAGE_B, 1.0 - 2.0 * TWO_STAGE_B, TWO_STAGE_B), (0.5, 0.5)),
    "three_stage": (
        (THREE_STAGE_B1, 0.5 - THREE_STAGE_B1, 0.5 - THREE_STAGE_B1, THREE_STAGE_B1),
        (THREE_STAGE_A1, 1.0 - 2.0 * THREE_STAGE_A1, THREE_STAGE_A1),
    ),
}


def make_rng(seed, *keys):
    """Generator for the stream identified by ``(seed, *keys)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class MassMatrix:
    """Diagonal HMC mass matrix."""

    diagonal: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.diagonal, dtype=float))
        if np.any(~(d > 0)) or not np.all(np.isfinite(d)):
            raise InvalidInputError("mass matrix entries must be finite and positive")
        object.__setattr__(self, "diagonal", d)

    @property
    def inverse(self):
        return 1.0 / self.diagonal

    @property
    def sqrt(self):
        return np.sqrt(self.diagonal)


def as_mass(mass):
    return mass if isinstance(mass, MassMatrix) else MassMatrix(mass)


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class TrajectoryParams:
    h: float
    m: int
    integrator: str = "verlet"

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidInputError("step size must be positive")
        if int(self.m) < 1:
            raise InvalidInputError("trajectory needs at least one step")
        if self.integrator not in SCHEMES:
            raise InvalidInputError(f"unknown integrator {self.integrator!r}")

    @property
    def length(self):
        return self.h * self.m


@dataclass
class ChainConfig:
    burn_in: int = 0
    mixing_steps: int = 0
    seed: object = None
    initial: np.ndarray = None

    def __post_init__(self):
        if self.burn_in < 0 or self.mixing_steps < 0:
            raise InvalidInputError("burn-in and mixing steps must be non-negative")


@dataclass
class ChainStats:
    proposals: int = 0
    acceptances: int = 0
    abs_dh: list = field(default_factory=list, repr=False)

    @property
    def acceptance_rate(self):
        return self.acceptances / self.proposals if self.proposals else 0.0

    @property
    def mean_abs_dH(self):
        finite = [v for v in self.abs_dh if math.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf") if self.abs_dh else 0.0

    def to_dict(self):
        return {
            "proposals": self.proposals,
            "acceptances": self.acceptances,
            "acceptance_rate": self.acceptance_rate,
            "mean_abs_dH": self.mean_abs_dH,
        }


def kinetic_energy(p, mass):
    p = np.asarray(p, dtype=float)
    return 0.5 * float(np.dot(p, p * as_mass(mass).inverse))


def total_energy(pt, mass, potential):
    return kinetic_energy(pt.p, mass) + float(potential.value(pt.x))


def _checked_gradient(potential, x):
    g = potential.gradient(x)
    if not np.all(np.isfinite(g)):
        raise TrajectoryDivergenceError("non-finite potential gradient")
    return g


def _advance(x, p, grad, h, steps, scheme, inv_mass, potential):
    kicks, drifts = SCHEMES[scheme]
    for _ in range(steps):
        p = p - (kicks[0] * h) * grad
        for k, a in enumerate(drifts):
            x = x + (a * h) * inv_mass * p
            grad = _checked_gradient(potential, x)
            p = p - (kicks[k + 1] * h) * grad
    return x, p, grad


def symplectic_step(pt, params, mass, potential):
    """One integrator step of size ``params.h``."""
    x = np.asarray(pt.x, dtype=float)
    grad = _checked_gradient(potential, x)
    x, p, _ = _advance(x, np.asarray(pt.p, dtype=float), grad, params.h, 1,
                       params.integrator, as_mass(mass).inverse, potential)
    return PhasePoint(x, p)


def integrate_trajectory(pt, params, mass, potential, grad=None):
    """``params.m`` composed steps approximating the flow over ``m * h``."""
    x = np.asarray(pt.x, dtype=float)
    if grad is None:
        grad = _checked_gradient(potential, x)
    x, p, _ = _advance(x, np.asarray(pt.p, dtype=float), grad, params.h, int(params.m),
                       params.integrator, as_mass(mass).inverse, potential)
    return PhasePoint(x, p)


def acceptance_probability(dH):
    if not math.isfinite(dH):
        return 0.0 if dH > 0 or math.isnan(dH) else 1.0
    return 1.0 if dH <= 0 else math.exp(-dH)


@dataclass
class _ChainPoint:
    x: np.ndarray
    value: float
    grad: np.ndarray


def _transition(state, mass, potential, params, rng):
    inv_mass = mass.inverse
    p0 = mass.sqrt * rng.standard_normal(state.x.shape)
    u = rng.random()
    h0 = 0.5 * float(np.dot(p0, p0 * inv_mass)) + state.value
    try:
        x1, p1, _ = _advance(state.x, p0, state.grad, params.h, int(params.m),
                             params.integrator, inv_mass, potential)
        v1, g1 = potential.value_and_gradient(x1)
        h1 = 0.5 * float(np.dot(p1, p1 * inv_mass)) + float(v1)
        dH = h1 - h0
        if not (math.isfinite(dH) and np.all(np.isfinite(x1)) and np.all(np.isfinite(g1))):
            dH = math.inf
    except (TrajectoryDivergenceError, FloatingPointError, OverflowError):
        dH = math.inf
    accepted = acceptance_probability(dH) > u
    if accepted:
        return _ChainPoint(x1, float(v1), np.asarray(g1)), True, dH
    return state, False, dH


def propose_and_accept(x_current, mass, potential, params, rng):
    """One Metropolis-corrected HMC transition.

    Returns ``(x_next, accepted, dH)``; momentum is redrawn from ``N(0, M)``
    and discarded afterwards. A diverging trajectory counts as a rejection
    with ``dH = +inf``.
    """
    x = np.asarray(x_current, dtype=float)
    value, grad = potential.value_and_gradient(x)
    if not math.isfinite(value):
        raise InvalidInputError("potential is not finite at the current state")
    state, accepted, dH = _transition(_ChainPoint(x, float(value), np.asarray(grad)),
                                      as_mass(mass), potential, params, make_rng(rng))
    return state.x, accepted, dH


def run_chain(potential, mass, params, cfg, n_samples):
    """Run one chain and return ``(samples, stats)``.

    ``cfg.burn_in`` transitions are discarded, then one state is kept every
    ``cfg.mixing_steps + 1`` transitions. Stats cover post-burn-in proposals.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    if cfg.initial is None:
        raise InvalidInputError("chain needs an initial position")
    mass = as_mass(mass)
    rng = make_rng(cfg.seed)
    x0 = np.array(cfg.initial, dtype=float)
    value, grad = potential.value_and_gradient(x0)
    if not (math.isfinite(value) and np.all(np.isfinite(grad))):
        raise FitFailureError("potential is not finite at the initial state")
    state = _ChainPoint(x0, float(value), np.asarray(grad))

    for _ in range(cfg.burn_in):
        state, _, _ = _transition(state, mass, potential, params, rng)

    stats = ChainStats()
    samples = np.empty((n_samples, x0.size))
    for s in range(n_samples):
        for _ in range(cfg.mixing_steps + 1):
            state, accepted, dH = _transition(state, mass, potential, params, rng)
            stats.proposals += 1
            stats.acceptances += int(accepted)
            stats.abs_dh.append(abs(dH))
        samples[s] = state.x
    return samples, stats


def chain_stats_json(stats):
    return dict(stats.to_dict())


__all__ = [
    "MassMatrix", "PhasePoint", "TrajectoryParams", "ChainConfig", "ChainStats",
    "kinetic_energy", "total_energy", "symplectic_step", "integrate_trajectory",
    "propose_and_accept", "run_chain", "acceptance_probability", "make_rng", "SCHEMES",
]
