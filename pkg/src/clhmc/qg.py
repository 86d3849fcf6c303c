"""Finite-difference 1.5-layer quasi-geostrophic model on the unit square.

The prognostic field is the potential vorticity ``q = lap(psi) - F psi``;
the model state handed to filters is ``psi`` flattened row-major from an
``(ny, nx)`` grid, so index ``k = j * nx + i`` sits at ``(x_i, y_j)``.
All fields vanish on the boundary, as do their Laplacian and bi-Laplacian.

The tendency is

    q_t = beta_sign * psi_x - eps * J(psi, q) - A lap^3(psi) + 2 pi sin(2 pi y)

with ``J(psi, q) = psi_x q_y - psi_y q_x`` discretized by Arakawa's
energy- and enstrophy-conserving stencil.
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _kernels
from .errors import InvalidInputError, MemberPropagationError, ModelBlowUpError, SolverError
from .potentials import IndexObservation, ObservationOperator

QG1_MAGIC = b"QG1\x00"


@dataclass(frozen=True)
class QgGrid:
    nx: int = 65
    ny: int = 65

    def __post_init__(self):
        if self.nx < 5 or self.ny < 5:
            raise InvalidInputError("grid needs at least 5 nodes per direction")

    @property
    def dx(self):
        return 1.0 / (self.nx - 1)

    @property
    def dy(self):
        return 1.0 / (self.ny - 1)

    @property
    def n_var(self):
        return self.nx * self.ny

    @property
    def shape(self):
        return (self.ny, self.nx)

    def coords(self):
        """``(X, Y)`` node coordinates, each shaped ``(ny, nx)``."""
        x = np.linspace(0.0, 1.0, self.nx)
        y = np.linspace(0.0, 1.0, self.ny)
        return np.meshgrid(x, y)

    def boundary_mask(self):
        mask = np.ones(self.shape, dtype=bool)
        mask[1:-1, 1:-1] = False
        return mask


@dataclass(frozen=True)
class QgParams:
    F: float = 1600.0
    eps: float = 1.0e-5
    A: float = 2.0e-12
    dt: float = 1.25
    beta_sign: float = 1.0
    forcing: bool = True

    def __post_init__(self):
        if self.F < 0 or self.eps < 0 or self.A < 0 or not self.dt > 0:
            raise InvalidInputError("QG parameters must be non-negative with dt > 0")


def _as_batch(field, grid):
    """View ``field`` as a contiguous ``(batch, ny, nx)`` array; report the input rank."""
    arr = np.asarray(field, dtype=float)
    if arr.ndim == 1:
        if arr.size != grid.n_var:
            raise InvalidInputError("flat field does not match grid")
        return np.ascontiguousarray(arr.reshape(1, grid.ny, grid.nx)), 1
    if arr.ndim == 2:
        if arr.shape == grid.shape:
            return np.ascontiguousarray(arr[None]), 2
        if arr.shape[1] == grid.n_var:
            return np.ascontiguousarray(arr.reshape(-1, grid.ny, grid.nx)), -2
        raise InvalidInputError("field does not match grid")
    if arr.ndim == 3 and arr.shape[1:] == grid.shape:
        return np.ascontiguousarray(arr), 3
    raise InvalidInputError("field does not match grid")


def _restore(batch, kind, grid):
    if kind == 1:
        return batch.reshape(grid.n_var)
    if kind == 2:
        return batch[0]
    if kind == -2:
        return batch.reshape(batch.shape[0], grid.n_var)
    return batch


def laplacian(field, grid):
    """Five-point Laplacian; zero on the boundary."""
    b, kind = _as_batch(field, grid)
    return _restore(_kernels.laplacian5(b, grid.dx, grid.dy), kind, grid)


def vorticity_from_psi(psi, grid, F):
    b, kind = _as_batch(psi, grid)
    return _restore(_kernels.laplacian5(b, grid.dx, grid.dy) - F * b, kind, grid)


def jacobian_term(psi, q, grid):
    """Arakawa Jacobian ``psi_x q_y - psi_y q_x``; zero on the boundary."""
    bp, kind = _as_batch(psi, grid)
    bq, _ = _as_batch(q, grid)
    return _restore(_kernels.arakawa(bp, bq, grid.dx, grid.dy), kind, grid)


def _d_dx(field, grid):
    out = np.zeros_like(field)
    out[:, 1:-1, 1:-1] = (field[:, 1:-1, 2:] - field[:, 1:-1, :-2]) / (2.0 * grid.dx)
    return out


class HelmholtzSolver:
    """Direct sparse solve of ``(lap - F) psi = q`` for interior nodes, psi = 0 on the boundary."""

    def __init__(self, grid, F):
        self.grid = grid
        self.F = float(F)
        nxi, nyi = grid.nx - 2, grid.ny - 2
        lx = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(nxi, nxi)) / grid.dx**2
        ly = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(nyi, nyi)) / grid.dy**2
        op = sp.kron(sp.identity(nyi), lx) + sp.kron(ly, sp.identity(nxi))
        op = op - self.F * sp.identity(nxi * nyi)
        self._lu = splu(sp.csc_matrix(op))

    def solve(self, q_batch, check=True):
        grid = self.grid
        n = q_batch.shape[0]
        rhs = q_batch[:, 1:-1, 1:-1].reshape(n, -1).T
        sol = self._lu.solve(np.ascontiguousarray(rhs))
        psi = np.zeros_like(q_batch)
        psi[:, 1:-1, 1:-1] = sol.T.reshape(n, grid.ny - 2, grid.nx - 2)
        if check:
            resid = (_kernels.laplacian5(psi, grid.dx, grid.dy) - self.F * psi - q_batch)[:, 1:-1, 1:-1]
            scale = np.abs(q_batch[:, 1:-1, 1:-1]).max(initial=0.0)
            worst = np.abs(resid).max(initial=0.0)
            if not np.isfinite(worst) or worst > 1e-8 * scale:
                raise SolverError(f"Helmholtz residual {worst:.3e} exceeds 1e-8 * {scale:.3e}")
        return psi


_SOLVERS = {}


def _solver(grid, F):
    key = (grid.nx, grid.ny, float(F))
    if key not in _SOLVERS:
        _SOLVERS[key] = HelmholtzSolver(grid, F)
    return _SOLVERS[key]


def psi_from_vorticity(q, grid, F):
    b, kind = _as_batch(q, grid)
    return _restore(_solver(grid, F).solve(b), kind, grid)


class QgModel:
    """QG model bound to one grid and parameter set.

    Instances are read-only after construction and can step different
    batches from several threads at once.
    """

    supports_batch = True

    def __init__(self, grid=None, params=None):
        self.grid = grid or QgGrid()
        self.params = params or QgParams()
        self.solver = _solver(self.grid, self.params.F)
        _, Y = self.grid.coords()
        f = 2.0 * np.pi * np.sin(2.0 * np.pi * Y)
        f[self.grid.boundary_mask()] = 0.0
        self._forcing = f if self.params.forcing else np.zeros_like(f)

    @property
    def n_var(self):
        return self.grid.n_var

    def _tendency(self, q):
        g, p = self.grid, self.params
        psi = self.solver.solve(q, check=False)
        out = p.beta_sign * _d_dx(psi, g)
        if p.eps:
            out -= p.eps * _kernels.arakawa(psi, q, g.dx, g.dy)
        if p.A:
            lap3 = _kernels.laplacian5(
                _kernels.laplacian5(_kernels.laplacian5(psi, g.dx, g.dy), g.dx, g.dy), g.dx, g.dy)
            out -= p.A * lap3
        out += self._forcing
        return out

    def tendency(self, q):
        b, kind = _as_batch(q, self.grid)
        return _restore(self._tendency(b), kind, self.grid)

    def rk4_step(self, q, tendency=None):
        """One classical RK4 step of size ``params.dt``.

        ``tendency`` replaces the model right-hand side (it receives and
        returns ``(batch, ny, nx)`` arrays); used for testing.
        """
        b, kind = _as_batch(q, self.grid)
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._rk4(b, tendency or self._tendency)
        if not np.all(np.isfinite(out)):
            raise ModelBlowUpError("non-finite field after RK4 step")
        return _restore(out, kind, self.grid)

    def _rk4(self, q, f):
        dt = self.params.dt
        k1 = f(q)
        k2 = f(q + 0.5 * dt * k1)
        k3 = f(q + 0.5 * dt * k2)
        k4 = f(q + dt * k3)
        out = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, 0, :] = out[:, -1, :] = 0.0
        out[:, :, 0] = out[:, :, -1] = 0.0
        return out

    def advance_psi(self, psi, n_steps):
        """Advance stream-function state(s) by ``n_steps`` model steps.

        Accepts a flat state, an ``(n_ens, n_var)`` batch or grid-shaped
        arrays. A non-finite member raises :class:`MemberPropagationError`.
        """
        b, kind = _as_batch(psi, self.grid)
        if n_steps == 0:
            return _restore(b.copy(), kind, self.grid)
        g = self.grid
        q = _kernels.laplacian5(b, g.dx, g.dy) - self.params.F * b
        q[:, 0, :] = q[:, -1, :] = 0.0
        q[:, :, 0] = q[:, :, -1] = 0.0
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(int(n_steps)):
                q = self._rk4(q, self._tendency)
                finite = np.isfinite(q).all(axis=(1, 2))
                if not finite.all():
                    bad = int(np.flatnonzero(~finite)[0])
                    raise MemberPropagationError(bad, ModelBlowUpError("non-finite field"))
        return _restore(self.solver.solve(q), kind, self.grid)

    def advance(self, x, t_from, t_to):
        """Propagator interface; times are model-step indices."""
        if t_to < t_from:
            raise InvalidInputError("cannot integrate backwards")
        return self.advance_psi(x, t_to - t_from)


def rk4_step(q, grid, params, tendency=None):
    return QgModel(grid, params).rk4_step(q, tendency)


def qg_tendency(q, grid, params):
    return QgModel(grid, params).tendency(q)


def _obs_indices(n_var, m_obs, offset):
    if not 1 <= m_obs <= n_var:
        raise InvalidInputError("need 1 <= m_obs <= n_var")
    stride = n_var // m_obs
    if not 0 <= offset < stride:
        raise InvalidInputError("offset must lie in [0, stride)")
    return offset + stride * np.arange(m_obs)


def draw_obs_offset(n_var, m_obs, seed, cycle=None):
    """Random offset in ``[0, stride)`` from the stream ``(seed[, cycle])``."""
    if not 1 <= m_obs <= n_var:
        raise InvalidInputError("need 1 <= m_obs <= n_var")
    stride = n_var // m_obs
    keys = [seed] if cycle is None else [seed, cycle]
    return int(np.random.default_rng(keys).integers(stride))


def linear_obs_operator(grid, m_obs, seed=0, offset_per_cycle=True, cycle=0, offset=None):
    """Uniform-stride point observations of psi.

    The offset is drawn from ``(seed, cycle)`` when ``offset_per_cycle`` is
    set and from ``seed`` alone otherwise, unless given explicitly.
    """
    if offset is None:
        offset = draw_obs_offset(grid.n_var, m_obs, seed, cycle if offset_per_cycle else None)
    return IndexObservation(_obs_indices(grid.n_var, m_obs, offset), grid.n_var)


def derivative_matrices(grid):
    """Sparse ``(Dx, Dy)`` acting on flattened fields.

    Central differences at interior nodes, one-sided on the boundary.
    """

    def d1(n, h):
        d = sp.lil_matrix((n, n))
        for i in range(1, n - 1):
            d[i, i - 1], d[i, i + 1] = -0.5 / h, 0.5 / h
        d[0, 0], d[0, 1] = -1.0 / h, 1.0 / h
        d[n - 1, n - 2], d[n - 1, n - 1] = -1.0 / h, 1.0 / h
        return d.tocsr()

    dx = sp.kron(sp.identity(grid.ny), d1(grid.nx, grid.dx), format="csr")
    dy = sp.kron(d1(grid.ny, grid.dy), sp.identity(grid.nx), format="csr")
    return dx, dy


class WindMagnitudeOperator(ObservationOperator):
    """Flow speed ``sqrt(u^2 + v^2 + eta^2)`` at selected nodes, ``u = psi_y``, ``v = -psi_x``.

    ``eta`` keeps the linearization finite where the flow stagnates.
    """

    linear = False

    def __init__(self, grid, indices, eta=1e-10):
        self.grid = grid
        self.indices = np.asarray(indices, dtype=np.intp)
        self.n_var = grid.n_var
        self.m_obs = self.indices.size
        self.eta = float(eta)
        dx, dy = derivative_matrices(grid)
        self._gu = dy[self.indices]
        self._gv = -dx[self.indices]
        self._gu_t = self._gu.T.tocsr()
        self._gv_t = self._gv.T.tocsr()

    def velocities(self, x):
        x = np.asarray(x, dtype=float)
        return self._gu @ x, self._gv @ x

    def apply(self, x):
        u, v = self.velocities(x)
        return np.sqrt(u * u + v * v + self.eta**2)

    def apply_many(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        u = (self._gu @ X.T).T
        v = (self._gv @ X.T).T
        return np.sqrt(u * u + v * v + self.eta**2)

    def tangent(self, x, dx):
        u, v = self.velocities(x)
        mag = np.sqrt(u * u + v * v + self.eta**2)
        dx = np.asarray(dx, dtype=float)
        return (u * (self._gu @ dx) + v * (self._gv @ dx)) / mag

    def adjoint_apply(self, x, w):
        u, v = self.velocities(x)
        mag = np.sqrt(u * u + v * v + self.eta**2)
        w = np.asarray(w, dtype=float) / mag
        return self._gu_t @ (u * w) + self._gv_t @ (v * w)


def wind_magnitude_operator(grid, m_obs, seed=0, offset_per_cycle=True, cycle=0, offset=None):
    if offset is None:
        offset = draw_obs_offset(grid.n_var, m_obs, seed, cycle if offset_per_cycle else None)
    return WindMagnitudeOperator(grid, _obs_indices(grid.n_var, m_obs, offset))


def write_field_csv(path, field, grid):
    b, _ = _as_batch(field, grid)
    np.savetxt(path, b[0], delimiter=",", fmt="%.17g")


def read_field_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def write_qg1(path, field, grid):
    b, _ = _as_batch(field, grid)
    with open(path, "wb") as fh:
        fh.write(QG1_MAGIC)
        fh.write(struct.pack("<ii", grid.nx, grid.ny))
        fh.write(b[0].astype("<f8").tobytes())


def read_qg1(path):
    """Return ``(field, grid)`` from a QG1 checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != QG1_MAGIC:
        raise InvalidInputError(f"{path}: not a QG1 file")
    nx, ny = struct.unpack("<ii", blob[4:12])
    data = np.frombuffer(blob[12:], dtype="<f8")
    if data.size != nx * ny:
        raise InvalidInputError(f"{path}: truncated QG1 payload")
    return data.reshape(ny, nx).astype(float), QgGrid(nx, ny)
