"""Water-phase source terms and the droplet-spectrum step.

The spectrum sigma has shape (n_bins, n_cells): liquid-water mass density per
unit droplet mass.  Mass integrals use the bin widths of the MassGrid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .domain import Domain, MassGrid
from . import transport


class SupportError(RuntimeError):
    """Droplet mass escaped the admissible mass interval."""


class NegativeDensityError(RuntimeError):
    pass


@dataclass(frozen=True)
class MicroParams:
    K1: float = 300.0
    c_l: float = 1.0
    m_a: float = 1.0
    m_A: float = 2.0
    M_cut: float = 16.0
    beta0: float = 1.0
    beta_ramp: float | None = None  # width of the cutoff ramp; None: one bin at M
    g0_amp: float = 1.0
    g1_amp: float = 1.0
    N_star: float = 0.0
    L_gl: float = 1.0
    alpha0: float = 1.0
    pi_ref: float = 0.01
    T_ref: float = 1.0
    R0: float = 1.0
    mu_h: float = 1.0

    def __post_init__(self):
        if self.K1 < 0 or self.c_l <= 0 or self.alpha0 <= 0 or self.pi_ref <= 0 or self.T_ref <= 0:
            raise ValueError("K1 >= 0 and c_l, alpha0, pi_ref, T_ref > 0 required")
        if not 0 < self.m_a < self.m_A:
            raise ValueError("need 0 < m_a < m_A")
        if self.M_cut <= self.m_a:
            raise ValueError("coagulation cutoff M must exceed m_a")
        if min(self.beta0, self.g0_amp, self.g1_amp, self.N_star) < 0:
            raise ValueError("beta0, g0_amp, g1_amp, N_star must be non-negative")


# ---------------------------------------------------------------- droplet shape laws

def _hermite_right(t):
    """Quintic basis functions with zero value/slope/curvature at t=0, matching
    value, slope, curvature at t=1."""
    t3 = t**3
    return (t3 * (10 - 15 * t + 6 * t * t),
            t3 * (-4 + 7 * t - 3 * t * t),
            0.5 * t3 * (1 - 2 * t + t * t))


def surface_area(m, params: MicroParams):
    """S_l(m): 0 up to m_a/2, c_l m^(2/3) from m_A on, C^2 quintic blend between."""
    m = np.asarray(m, dtype=float)
    lo, hi = 0.5 * params.m_a, params.m_A
    L = hi - lo
    c = params.c_l
    f1 = c * hi ** (2 / 3)
    d1 = (2 / 3) * c * hi ** (-1 / 3)
    s1 = -(2 / 9) * c * hi ** (-4 / 3)
    t = np.clip((m - lo) / L, 0.0, 1.0)
    h0, h1, h2 = _hermite_right(t)
    blend = f1 * h0 + d1 * L * h1 + s1 * L * L * h2
    out = np.where(m <= lo, 0.0, np.where(m >= hi, c * np.maximum(m, 0) ** (2 / 3), blend))
    return out


def saturation_density(T, params: MicroParams):
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("saturation_density: temperature must be positive")
    k = params.L_gl * params.mu_h / params.R0
    return params.pi_ref * np.exp(-k * (1 / T - 1 / params.T_ref))


def saturation_density_dT(T, params: MicroParams):
    k = params.L_gl * params.mu_h / params.R0
    return saturation_density(T, params) * k / np.asarray(T, dtype=float) ** 2


def h_gl(T, pi, m, params: MicroParams):
    """Per-droplet condensation rate K1 (S_l/m)(pi - pi_vs); broadcasts m against cells."""
    m = np.asarray(m, dtype=float)
    sm = np.where(m > 0, surface_area(m, params) / np.where(m > 0, m, 1.0), 0.0)
    sup = np.asarray(pi, dtype=float) - saturation_density(T, params)
    return params.K1 * np.multiply.outer(sm, sup) if sm.ndim else params.K1 * sm * sup


def _grid_sm(mass: MassGrid, params):
    c = mass.centers
    return surface_area(c, params) / c


def bulk_exchange(T, pi, sigma, params: MicroParams, mass: MassGrid):
    """H_gl = sum_bins h_gl(m) sigma(m) dm per cell."""
    h = h_gl(T, pi, mass.centers, params)
    return mass.integrate(h * sigma)


def condensation_capacity(sigma, params, mass):
    """S(x) = int (S_l/m) sigma dm, the linear rate factor of H_gl."""
    return mass.integrate(_grid_sm(mass, params)[:, None] * sigma)


def condensation_limiter(sigma, params, mass, dt):
    """Shared relaxation factor theta <= 1 so an explicit step cannot overshoot saturation."""
    k = dt * params.K1 * condensation_capacity(sigma, params, mass)
    return np.where(k > 1.0, 1.0 / np.where(k > 1.0, k, 1.0), 1.0)


# ---------------------------------------------------------------- coagulation

def kernel_matrix(params: MicroParams, mass: MassGrid):
    """beta(m_k, m_l) on bin centers: beta0 with a C^1 ramp to 0 as m+m' -> M."""
    c = mass.centers
    s = c[:, None] + c[None, :]
    w = params.beta_ramp
    if w is None:
        k = int(np.clip(np.searchsorted(mass.edges, params.M_cut) - 1, 0, mass.n_bins - 1))
        w = float(mass.widths[k])
    t = np.clip((params.M_cut - s) / w, 0.0, 1.0)
    ramp = t * t * (3 - 2 * t)
    beta = params.beta0 * ramp
    return 0.5 * (beta + beta.T)


@lru_cache(maxsize=16)
def _remap_cached(edges_key, M_cut):
    centers = 0.5 * (np.array(edges_key[1:]) + np.array(edges_key[:-1]))
    K = len(centers)
    rows, cols, vals = [], [], []
    for k in range(K):
        for l in range(K):
            s = centers[k] + centers[l]
            p = k * K + l
            i = int(np.searchsorted(centers, s, side="right") - 1)
            if i >= K - 1:
                rows.append(K - 1); cols.append(p); vals.append(1.0)
                continue
            lo, hi = centers[i], centers[i + 1]
            if hi >= M_cut or s == lo:
                rows.append(i); cols.append(p); vals.append(1.0)
                continue
            f_lo = lo * (hi - s) / (s * (hi - lo))
            rows += [i, i + 1]; cols += [p, p]; vals += [f_lo, 1.0 - f_lo]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(K, K * K))


def remap_matrix(mass: MassGrid, M_cut):
    """Sparse (bins, bins*bins) split of pair mass at m_k+m_l onto bracketing centers.

    Conserves both deposited mass and the corresponding number (mass / (m_k+m_l)).
    """
    return _remap_cached(tuple(mass.edges.tolist()), float(M_cut))


def coagulation_loss_rate(sigma, beta, mass: MassGrid):
    """Per-unit-sigma loss rate -m_k sum_l beta_kl sigma_l dm_l, shape like sigma."""
    return -mass.centers[:, None] * (beta @ (sigma * mass.widths[:, None]))


def coagulation(sigma, params: MicroParams, mass: MassGrid, beta=None):
    """Collision loss B1 <= 0 and gain B2 >= 0 per (bin, cell)."""
    sigma = np.asarray(sigma, dtype=float)
    beta = kernel_matrix(params, mass) if beta is None else beta
    B1 = coagulation_loss_rate(sigma, beta, mass) * sigma
    P = sigma * mass.widths[:, None]  # (K, N)
    c = mass.centers
    half_sum = 0.5 * (c[:, None] + c[None, :]) * beta  # (K, K)
    pairs = half_sum[:, :, None] * P[:, None, :] * P[None, :, :]
    gain = remap_matrix(mass, params.M_cut) @ pairs.reshape(len(c) ** 2, -1)
    B2 = gain / mass.widths[:, None]
    return B1, B2


# ---------------------------------------------------------------- nucleation and removal

def g0(m, params: MicroParams):
    """Unit-integral C^2 bump on [m_a, m_A] times g0_amp."""
    m = np.asarray(m, dtype=float)
    L = params.m_A - params.m_a
    t = np.clip((m - params.m_a) / L, 0, 1)
    return params.g0_amp * 140.0 / L * (t * (1 - t)) ** 3


def g1(m, params: MicroParams):
    """g1_amp on [0, m_a], smooth quintic step down to 0 at m_A."""
    m = np.asarray(m, dtype=float)
    t = np.clip((m - params.m_a) / (params.m_A - params.m_a), 0, 1)
    step = t**3 * (10 - 15 * t + 6 * t * t)
    return params.g1_amp * (1 - step) * (m >= 0)


def droplet_number(sigma, mass: MassGrid):
    """N~(sigma) = int sigma/m dm."""
    return mass.integrate(sigma / mass.centers[:, None])


def nucleation(pi, T, sigma, params: MicroParams, mass: MassGrid):
    supsat = np.maximum(np.asarray(pi) - saturation_density(T, params), 0.0)
    budget = np.maximum(params.N_star - droplet_number(sigma, mass), 0.0)
    return g0(mass.centers, params)[:, None] * (budget * supsat)[None, :]


def evaporation_removal(pi, T, sigma, params: MicroParams, mass: MassGrid):
    subsat = np.maximum(saturation_density(T, params) - np.asarray(pi), 0.0)
    return -g1(mass.centers, params)[:, None] * subsat[None, :] * sigma


# ---------------------------------------------------------------- spectrum step

@dataclass(frozen=True)
class SpectrumSwitches:
    condensation: bool = True
    coagulation: bool = True
    nucleation: bool = True
    removal: bool = True
    transport: bool = True


def drift_velocity_edges(T, pi, params, mass, theta=1.0):
    """Mass-space velocity m h_gl at interior bin edges, shape (bins-1, cells)."""
    e = mass.edges[1:-1]
    sl = surface_area(e, params)
    sup = np.asarray(pi, dtype=float) - saturation_density(T, params)
    return params.K1 * sl[:, None] * (theta * sup)[None, :]


def mass_drift(sigma, mdot, mass: MassGrid, dt, max_cfl=0.9):
    """Conservative upwind update of d sigma/dt + d(mdot sigma)/dm = 0, sub-cycled."""
    w = mass.widths[:, None]
    wmin = np.minimum(w[:-1], w[1:])
    cfl = dt * float(np.max(np.abs(mdot) / wmin, initial=0.0))
    nsub = max(1, int(math.ceil(cfl / max_cfl)))
    h = dt / nsub
    s = np.array(sigma, dtype=float)
    for _ in range(nsub):
        flux = np.where(mdot > 0, mdot * s[:-1], mdot * s[1:])
        div = np.zeros_like(s)
        div[:-1] += flux
        div[1:] -= flux
        s = s - h * div / w
    return s, nsub


def droplet_face_velocities(domain: Domain, v, phi, mass: MassGrid, params: MicroParams):
    """u = v - grad(Phi)/alpha_l(m) on interior faces, per bin: list over axes of (bins, faces)."""
    al = params.alpha0 * mass.centers ** (-1 / 3)
    out = []
    for ax, (left, right) in enumerate(domain.interior_faces):
        vf = 0.5 * (v[left, ax] + v[right, ax])
        gphi = (phi[right] - phi[left]) / domain.spacing[ax]
        out.append(vf[None, :] - gphi[None, :] / al[:, None])
    return out


def check_support(sigma, mass: MassGrid, tol=1e-12, neg_tol=1e-14):
    """Raise on negatives beyond round-off or mass outside ]m_a/2, M1[; clamp round-off."""
    scale = float(np.max(np.abs(sigma), initial=0.0))
    if np.any(sigma < -neg_tol * max(scale, 1e-300)):
        raise NegativeDensityError(f"droplet spectrum negative: min {sigma.min():.3e}")
    sigma = np.maximum(sigma, 0.0)
    per_bin = mass.widths @ sigma if sigma.ndim == 1 else (sigma * mass.widths[:, None]).sum(axis=1)
    total = float(per_bin.sum())
    bad = ~mass.allowed
    bad_low = bad.copy()
    bad_low[-1] = False
    if total > 0:
        if per_bin[bad_low].sum() > tol * total:
            raise SupportError("droplet mass found at or below m_a/2")
        if per_bin[-1] > tol * total:
            raise SupportError("droplet mass reached the top mass bin; increase M1 or shorten the horizon")
    return sigma


def spectrum_step(sigma, dt, params: MicroParams, mass: MassGrid, T, pi, sigma_lag=None,
                  domain: Domain | None = None, v=None, phi=None,
                  switches: SpectrumSwitches = SpectrumSwitches(), beta=None, return_info=False):
    """One explicit step of the linearized spectrum equation.

    Coefficients (T, pi) and the sources (nucleation, coagulation gain,
    limiter) are frozen at the lagged iterate; the loss, growth and drift
    terms act on ``sigma``.
    """
    sigma = np.asarray(sigma, dtype=float)
    lag = sigma if sigma_lag is None else np.asarray(sigma_lag, dtype=float)
    rate = np.zeros_like(sigma)
    src = np.zeros_like(sigma)
    info = {"drift_substeps": 0, "transport_substeps": 0}
    theta = np.ones(sigma.shape[1])
    if switches.condensation and params.K1 > 0:
        theta = condensation_limiter(lag, params, mass, dt)
        rate += theta[None, :] * h_gl(T, pi, mass.centers, params)
    if switches.coagulation and params.beta0 > 0:
        beta = kernel_matrix(params, mass) if beta is None else beta
        rate += coagulation_loss_rate(lag, beta, mass)
        src += coagulation(lag, params, mass, beta)[1]
    if switches.removal and params.g1_amp > 0:
        subsat = np.maximum(saturation_density(T, params) - np.asarray(pi), 0.0)
        rate -= g1(mass.centers, params)[:, None] * subsat[None, :]
    if switches.nucleation and params.g0_amp > 0 and params.N_star > 0:
        src += nucleation(pi, T, lag, params, mass)
    new = sigma + dt * (rate * sigma + src)
    if switches.condensation and params.K1 > 0:
        mdot = drift_velocity_edges(T, pi, params, mass, theta)
        new, info["drift_substeps"] = mass_drift(new, mdot, mass, dt)
    if switches.transport and domain is not None and v is not None:
        phi = np.zeros(domain.n_cells) if phi is None else phi
        u = droplet_face_velocities(domain, v, phi, mass, params)
        new, info["transport_substeps"] = transport.upwind_step(domain, new, u, dt)
    new = check_support(new, mass)
    return (new, info) if return_info else new


def dm_sigma_diagnostic(sigma, mass: MassGrid):
    """sup over cells of |sigma_k+1 - sigma_k| / (m_k+1 - m_k), zero padded beyond the grid."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    c = mass.centers
    pad = np.concatenate([np.zeros((1, s.shape[1])), s, np.zeros((1, s.shape[1]))])
    gaps = np.concatenate([[mass.widths[0]], np.diff(c), [mass.widths[-1]]])
    return float(np.max(np.abs(np.diff(pad, axis=0)) / gaps[:, None], initial=0.0))
