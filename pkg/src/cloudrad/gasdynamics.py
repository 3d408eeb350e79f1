"""Density transport and the linear parabolic solves for velocity and temperature.

Every step is linear: advecting velocities, pressure temperature and source
terms come from the lagged iterate, only the diffusion part is implicit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from . import microphysics as micro
from . import transport
from .domain import Domain, MassGrid


class CFLError(ValueError):
    pass


class LinearSolveError(RuntimeError):
    pass


class TemperatureError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhysParams:
    eta: float = 0.05
    zeta: float = 0.05
    kappa: float = 0.05
    c_v: float = 2.5
    R0: float = 1.0
    mu_a: float = 1.0
    mu_h: float = 0.622
    phi_kind: str = "zero"  # "zero" or "cosine_z"
    phi_amp: float = 0.0

    def __post_init__(self):
        for k in ("eta", "zeta", "kappa", "c_v", "R0", "mu_a", "mu_h"):
            if not getattr(self, k) > 0:
                raise ValueError(f"physical parameter {k} must be strictly positive")
        if self.phi_kind not in ("zero", "cosine_z"):
            raise ValueError(f"unknown potential kind {self.phi_kind!r}")


def potential(domain: Domain, params: PhysParams):
    """Phi per cell; the cosine profile has zero normal derivative on the z faces."""
    if params.phi_kind == "zero" or params.phi_amp == 0:
        return np.zeros(domain.n_cells)
    z = domain.centers[:, 2]
    lo = domain.origin[2]
    Lz = domain.spacing[2] * domain.lattice_shape[2]
    return params.phi_amp * np.cos(math.pi * (z - lo) / Lz)


def pressure(rho, pi, T, params: PhysParams):
    return params.R0 * (np.asarray(rho) / params.mu_a + np.asarray(pi) / params.mu_h) * np.asarray(T)


def droplet_velocity(domain: Domain, v, phi, m, mparams: micro.MicroParams):
    """u = v - grad(Phi) / alpha_l(m) at cell centers."""
    al = mparams.alpha0 * float(m) ** (-1 / 3)
    return np.asarray(v, dtype=float) - domain.gradient(phi) / al


def _check_cfl(domain, face_vel, dt, limit=0.9):
    c = transport.cfl_number(domain, face_vel, dt)
    if c > limit:
        raise CFLError(f"CFL number {c:.4g} exceeds {limit}")
    return c


def advect_density(domain: Domain, rho, v, dt):
    """Flux-form upwind update of d rho/dt + div(rho v) = 0 with zero boundary flux."""
    fv = transport.face_average(domain, v)
    _check_cfl(domain, fv, dt)
    out, _ = transport.upwind_step(domain, rho, fv, dt)
    return out


def vapor_step(domain: Domain, pi, v, dt, mparams: micro.MicroParams, mass: MassGrid,
               T_lag, pi_lag, sigma_lag, condensation=True):
    """Advect pi and subtract dt * theta * H_gl(T_lag, pi_lag, sigma_lag).

    theta is the limiter shared with the spectrum step, so vapor lost here is
    exactly the liquid gained there.
    """
    pi = np.asarray(pi, dtype=float)
    if condensation and mparams.K1 > 0:
        theta = micro.condensation_limiter(sigma_lag, mparams, mass, dt)
        H = micro.bulk_exchange(T_lag, pi_lag, sigma_lag, mparams, mass)
        pi = pi - dt * theta * H
    fv = transport.face_average(domain, v)
    _check_cfl(domain, fv, dt)
    out, _ = transport.upwind_step(domain, pi, fv, dt)
    scale = max(float(np.abs(out).max(initial=0.0)), 1e-300)
    if np.any(out < -1e-14 * scale):
        raise micro.NegativeDensityError(f"vapor density negative: min {out.min():.3e}")
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------- elliptic operators

def _lattice_shift(domain: Domain, offset):
    """Active index of the lattice neighbor at ``offset`` for every active cell (-1 if none)."""
    pos = domain.ijk + np.asarray(offset)
    n = np.asarray(domain.lattice_shape)
    ok = np.all((pos >= 0) & (pos < n), axis=1)
    out = np.full(domain.n_cells, -1, dtype=np.int64)
    out[ok] = domain.index[tuple(pos[ok].T)]
    return out, pos, ok


class VelocityOperator:
    """-eta Lap(v) - (zeta + eta/3) grad(div v) on interior cells.

    Boundary cells and lattice points outside the domain are Dirichlet nodes.
    Second derivatives use the compact 3-point stencil, mixed derivatives the
    4-point cross; the assembled matrix is symmetric positive semidefinite.
    """

    def __init__(self, domain: Domain, params: PhysParams):
        self.domain, self.params = domain, params
        unknown = ~domain.boundary
        self.unknown_cells = np.nonzero(unknown)[0]
        pos = np.full(domain.n_cells, -1, dtype=np.int64)
        pos[self.unknown_cells] = np.arange(len(self.unknown_cells))
        self.pos = pos
        nu = len(self.unknown_cells)
        lam = params.zeta + params.eta / 3
        h = domain.spacing
        cells = self.unknown_cells
        # entries: (row comp, col comp, offset, coefficient)
        stencil = []
        for a in range(3):
            for ax in range(3):
                c = params.eta / h[ax] ** 2
                e = np.zeros(3, dtype=int); e[ax] = 1
                stencil += [(a, a, tuple(e), -c), (a, a, tuple(-e), -c), (a, a, (0, 0, 0), 2 * c)]
            e = np.zeros(3, dtype=int); e[a] = 1
            c = lam / h[a] ** 2
            stencil += [(a, a, tuple(e), -c), (a, a, tuple(-e), -c), (a, a, (0, 0, 0), 2 * c)]
            for b in range(3):
                if b == a:
                    continue
                c = lam / (4 * h[a] * h[b])
                for sa in (1, -1):
                    for sb in (1, -1):
                        off = np.zeros(3, dtype=int); off[a] = sa; off[b] = sb
                        stencil.append((a, b, tuple(off), -c * sa * sb))
        rows, cols, vals = [], [], []
        # known-node couplings: (row index, component, lattice position, coefficient)
        krows, kcomp, kpos, kval = [], [], [], []
        for a, b, off, c in stencil:
            nb, lat, ok = _lattice_shift(domain, off)
            nb, lat = nb[cells], lat[cells]
            col = np.where(nb >= 0, pos[np.maximum(nb, 0)], -1)
            inner = col >= 0
            r = np.arange(nu)
            rows.append(3 * r[inner] + a); cols.append(3 * col[inner] + b)
            vals.append(np.full(inner.sum(), c))
            kr = ~inner
            krows.append(3 * r[kr] + a); kcomp.append(np.full(kr.sum(), b))
            kpos.append(lat[kr]); kval.append(np.full(kr.sum(), c))
        self.K = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(3 * nu, 3 * nu))
        self._known = (np.concatenate(krows), np.concatenate(kcomp), np.concatenate(kpos),
                       np.concatenate(kval))

    def known_lattice_points(self):
        """Physical coordinates of the Dirichlet lattice points touched by the stencil."""
        d = self.domain
        return d.origin + (self._known[2] + 0.5) * d.spacing

    def dirichlet_rhs(self, known_values):
        """-A_UK g for Dirichlet values g listed per known coupling, shape (n_entries, 3)."""
        r, comp, _, c = self._known
        out = np.zeros(self.K.shape[0])
        np.add.at(out, r, -c * known_values[np.arange(len(r)), comp])
        return out


class NeumannLaplacian:
    """Finite-volume -Lap with zero flux through boundary faces (graph Laplacian)."""

    def __init__(self, domain: Domain):
        n = domain.n_cells
        rows, cols, vals = [], [], []
        for ax, (left, right) in enumerate(domain.interior_faces):
            c = 1.0 / domain.spacing[ax] ** 2
            rows += [left, right, left, right]
            cols += [left, right, right, left]
            vals += [np.full(len(left), c)] * 2 + [np.full(len(left), -c)] * 2
        self.L = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                   shape=(n, n))


def _cg(A, b, x0=None, rtol=1e-10):
    diag = A.diagonal()
    M = sparse.diags(1.0 / diag)
    bn = float(np.linalg.norm(b))
    if bn == 0.0:
        return np.zeros_like(b), 0.0, 0
    history = []
    x, info = spla.cg(A, b, x0=x0, rtol=0.1 * rtol, atol=0.0, maxiter=20 * len(b) + 100, M=M,
                      callback=lambda xk: history.append(1))
    res = float(np.linalg.norm(b - A @ x)) / bn
    if res > rtol:
        x, info = spla.cg(A, b, x0=x, rtol=0.01 * rtol, atol=0.0, maxiter=20 * len(b) + 100, M=M)
        res = float(np.linalg.norm(b - A @ x)) / bn
    if res > rtol:
        raise LinearSolveError(f"CG did not reach relative residual {rtol}: {res:.3e} (info={info})")
    return x, res, len(history)


_OP_CACHE: dict = {}


def _velocity_operator(domain, params):
    key = (id(domain), params.eta, params.zeta)
    op = _OP_CACHE.get(key)
    if op is None or op.domain is not domain:
        op = VelocityOperator(domain, params)
        _OP_CACHE[key] = op
    return op


def momentum_step(domain: Domain, rho, pi, sigma_mass, v, v_lag, T_lag, phi, dt, params: PhysParams,
                  forcing=None, boundary_value=None, rtol=1e-10, return_info=False):
    """Backward-Euler solve of the linearized momentum system.

    (rho+pi)(v - v_old)/dt - eta Lap v - (zeta + eta/3) grad div v
        = -(rho+pi)(v_lag . grad) v_lag - R0 grad((rho/mu_a + pi/mu_h) T_lag)
          - (int sigma dm + rho + pi) grad Phi + forcing

    ``boundary_value(points) -> (P, 3)`` prescribes Dirichlet data (default 0).
    """
    op = _velocity_operator(domain, params)
    cells = op.unknown_cells
    coef = (np.asarray(rho) + np.asarray(pi))
    if np.any(coef <= 0):
        raise ValueError("momentum_step: rho + pi must be positive")
    g = domain.gradient
    vl = np.asarray(v_lag, dtype=float)
    adv = np.einsum("nj,nij->ni", vl, np.stack([g(vl[:, i]) for i in range(3)], axis=1))
    rhs = (coef[:, None] * np.asarray(v, dtype=float) / dt
           - coef[:, None] * adv
           - params.R0 * g((np.asarray(rho) / params.mu_a + np.asarray(pi) / params.mu_h) * T_lag)
           - (np.asarray(sigma_mass) + coef)[:, None] * g(phi))
    if forcing is not None:
        rhs = rhs + forcing
    b = rhs[cells].ravel()
    v_new = np.zeros((domain.n_cells, 3))
    if boundary_value is not None:
        b = b + op.dirichlet_rhs(boundary_value(op.known_lattice_points()))
        v_new[domain.boundary] = boundary_value(domain.centers[domain.boundary])
    A = op.K + sparse.diags(np.repeat(coef[cells] / dt, 3))
    x0 = np.asarray(v, dtype=float)[cells].ravel()
    x, res, iters = _cg(A.tocsr(), b, x0=x0, rtol=rtol)
    v_new[cells] = x.reshape(-1, 3)
    return (v_new, {"residual": res, "iterations": iters}) if return_info else v_new


def viscous_dissipation(domain: Domain, v, params: PhysParams):
    """(eta/2) sum_ij S_ij^2 + zeta (div v)^2, S the deviatoric rate of strain."""
    G = velocity_gradient(domain, v)
    div = np.trace(G, axis1=1, axis2=2)
    S = G + np.transpose(G, (0, 2, 1)) - (2 / 3) * div[:, None, None] * np.eye(3)
    return 0.5 * params.eta * np.einsum("nij,nij->n", S, S) + params.zeta * div**2


def viscous_dissipation_unsymmetrized(domain: Domain, v, params: PhysParams):
    """eta sum_ij (d_j v_i + d_i v_j - (2/3) delta_ij div v) d_j v_i + zeta (div v)^2."""
    G = velocity_gradient(domain, v)
    div = np.trace(G, axis1=1, axis2=2)
    total = np.zeros(domain.n_cells)
    for i in range(3):
        for j in range(3):
            total += (G[:, i, j] + G[:, j, i] - (2 / 3) * (i == j) * div) * G[:, i, j]
    return params.eta * total + params.zeta * div**2


def velocity_gradient(domain: Domain, v):
    """G[n, i, j] = d v_i / d x_j."""
    v = np.asarray(v, dtype=float)
    return np.stack([domain.gradient(v[:, i]) for i in range(3)], axis=1)


_LAP_CACHE: dict = {}


def _neumann(domain):
    key = id(domain)
    op = _LAP_CACHE.get(key)
    if op is None or op[0] is not domain:
        op = (domain, NeumannLaplacian(domain))
        _LAP_CACHE[key] = op
    return op[1]


def temperature_step(domain: Domain, rho, pi, T, v_lag, T_lag, dt, params: PhysParams,
                     divE=None, H_gl=None, L_gl=0.0, forcing=None, rtol=1e-10, return_info=False):
    """Backward-Euler solve of the linearized heat equation with zero-flux boundaries.

    (rho+pi) c_v (T - T_old)/dt - kappa Lap T
        = -(rho+pi) c_v v_lag . grad T_lag - R0 (rho/mu_a + pi/mu_h) T_lag div v_lag
          + Psi(v_lag) - div E + L_gl H_gl + forcing
    """
    coef = (np.asarray(rho) + np.asarray(pi)) * params.c_v
    if np.any(coef <= 0):
        raise ValueError("temperature_step: (rho+pi) c_v must be positive")
    vl = np.asarray(v_lag, dtype=float)
    Tl = np.asarray(T_lag, dtype=float)
    rhs = coef * np.asarray(T, dtype=float) / dt
    if np.any(vl):
        G = velocity_gradient(domain, vl)
        div = np.trace(G, axis1=1, axis2=2)
        rhs = rhs - coef * np.einsum("ni,ni->n", vl, domain.gradient(Tl))
        rhs = rhs - params.R0 * (np.asarray(rho) / params.mu_a + np.asarray(pi) / params.mu_h) * Tl * div
        rhs = rhs + viscous_dissipation(domain, vl, params)
    if divE is not None:
        rhs = rhs - divE
    if H_gl is not None:
        rhs = rhs + L_gl * np.asarray(H_gl)
    if forcing is not None:
        rhs = rhs + forcing
    A = (params.kappa * _neumann(domain).L + sparse.diags(coef / dt)).tocsr()
    x, res, iters = _cg(A, rhs, x0=np.asarray(T, dtype=float), rtol=rtol)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise TemperatureError(f"non-positive temperature {x.min():.4g} at cell {int(np.argmin(x))}")
    return (x, {"residual": res, "iterations": iters}) if return_info else x

