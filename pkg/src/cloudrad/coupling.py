"""Nested fixed-point iterations over a short time horizon.

Inner loop: vapor and droplet spectrum for frozen velocity and temperature
trajectories.  Outer loop: velocity and temperature for densities and
radiation computed from the previous outer iterate.  Both loops record their
successive distances and contraction ratios; the horizon is halved until the
ratios are admissible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gasdynamics as gas
from . import microphysics as micro
from . import radiation as rad
from .domain import AngularQuadrature, Domain, MassGrid, WavelengthBands


class HorizonTooLarge(RuntimeError):
    """A contraction factor or a hard a-priori bound failed on this horizon."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class IterationLimit(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class NoAdmissibleHorizon(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class State:
    rho: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray  # (bins, cells)
    v: np.ndarray  # (cells, 3)
    T: np.ndarray


@dataclass
class Trajectory:
    dt: float
    rho: np.ndarray  # (levels, cells)
    pi: np.ndarray
    sigma: np.ndarray  # (levels, bins, cells)
    v: np.ndarray  # (levels, cells, 3)
    T: np.ndarray
    divE: np.ndarray
    H_gl: np.ndarray
    I: list = field(default_factory=list)

    @property
    def nsteps(self):
        return self.rho.shape[0] - 1

    @property
    def times(self):
        return self.dt * np.arange(self.nsteps + 1)

    def state(self, n):
        return State(self.rho[n], self.pi[n], self.sigma[n], self.v[n], self.T[n])


@dataclass
class Couplings:
    """Process switches; turning all water terms off makes the inner map source free."""

    spectrum: micro.SpectrumSwitches = micro.SpectrumSwitches()
    radiation: bool = True
    latent_heat: bool = True
    momentum: bool = True
    temperature: bool = True


@dataclass
class CoupledProblem:
    domain: Domain
    mass: MassGrid
    quadrature: AngularQuadrature
    bands: WavelengthBands
    phys: gas.PhysParams
    micro: micro.MicroParams
    optics: rad.OpticalCoefficients
    boundary: rad.BoundaryIntensity
    initial: State
    dt: float
    constants: rad.PlanckConstants = rad.PlanckConstants.nondimensional()
    couplings: Couplings = field(default_factory=Couplings)
    rad_tol: float = 1e-8
    rad_max_sweeps: int = 200
    line_step: float | None = None
    threads: int = 1
    inner_tol: float = 1e-10
    inner_max: int = 30
    outer_tol: float = 1e-8
    outer_max: int = 30
    p: float = 5.0
    q: float = 4.0
    eps1: float | None = None
    eps2: float = 1e-6

    def __post_init__(self):
        self.phi = gas.potential(self.domain, self.phys)
        self._rad_model = None

    @property
    def radiation_model(self):
        if self._rad_model is None:
            self._rad_model = rad.RadiationModel(
                self.domain, self.quadrature, self.bands, self.mass, self.optics, self.boundary,
                self.constants, self.line_step, self.threads)
        return self._rad_model


# ---------------------------------------------------------------- norms

def lp_norm(domain: Domain, f, p, mass: MassGrid | None = None):
    """Discrete L^p over cells (and mass bins if ``mass`` is given); vector components summed."""
    f = np.abs(np.asarray(f, dtype=float))
    w = domain.cell_volume
    if mass is not None:
        f = f * mass.widths.reshape((-1,) + (1,) * (f.ndim - 1)) ** (1 / p)
    return float((w * np.sum(f**p)) ** (1 / p))


def _grad_all(domain, f):
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        return domain.gradient(f)
    return np.stack([domain.gradient(f[:, i]) for i in range(f.shape[1])], axis=1)


def w1p_norm(domain, f, p):
    g = _grad_all(domain, f)
    return float((lp_norm(domain, f, p) ** p + lp_norm(domain, g, p) ** p) ** (1 / p))


def w2p_norm(domain, f, p):
    g = _grad_all(domain, f)
    gg = np.stack([_grad_all(domain, g[..., k]) for k in range(3)], axis=-1)
    return float((w1p_norm(domain, f, p) ** p + lp_norm(domain, gg, p) ** p) ** (1 / p))


def l2_norm(domain, f):
    return lp_norm(domain, f, 2)


def h1_norm(domain, f):
    return w1p_norm(domain, f, 2)


def trace_norm(domain, f, p):
    """W^{2-2/p}_p proxy: geometric interpolation between W^1_p and W^2_p."""
    th = 1 - 2 / p
    a, b = w1p_norm(domain, f, p), w2p_norm(domain, f, p)
    return float(a ** (1 - th) * b**th) if a > 0 and b > 0 else 0.0


def parabolic_norm_p(domain, series, dt, p):
    """||f||_{W^{2,1}_p(Q_t)}^p by backward differences in time, cumulative per level."""
    out = [0.0]
    for n in range(1, len(series)):
        dtf = (series[n] - series[n - 1]) / dt
        term = w2p_norm(domain, series[n], p) ** p + lp_norm(domain, dtf, p) ** p
        out.append(out[-1] + dt * term)
    return np.array(out)


@dataclass
class NormReport:
    p: float
    q: float
    fields: dict
    V_pv: list
    V_qT: list
    R: dict

    def as_dict(self):
        return {"p": self.p, "q": self.q, "fields": self.fields, "V_pv": self.V_pv,
                "V_qT": self.V_qT, "R": self.R}


def norm_estimators(domain: Domain, traj: Trajectory, mass: MassGrid, p=5.0, q=4.0) -> NormReport:
    """Discrete norms of every field and the space-time functionals per level."""
    fields = {}
    last = traj.nsteps
    for name in ("rho", "pi", "T"):
        f = getattr(traj, name)[last]
        fields[name] = {"Lp": lp_norm(domain, f, p), "W1p": w1p_norm(domain, f, p),
                        "L2": l2_norm(domain, f), "H1": h1_norm(domain, f)}
    v = traj.v[last]
    fields["v"] = {"Lp": lp_norm(domain, v, p), "W1p": w1p_norm(domain, v, p),
                   "L2": l2_norm(domain, v), "H1": h1_norm(domain, v)}
    fields["sigma"] = {"Lp": lp_norm(domain, traj.sigma[last], p, mass),
                       "L2": lp_norm(domain, traj.sigma[last], 2, mass)}
    Wv = parabolic_norm_p(domain, traj.v, traj.dt, p)
    WT = parabolic_norm_p(domain, traj.T, traj.dt, q)
    sv = np.maximum.accumulate([trace_norm(domain, traj.v[n], p) ** p for n in range(last + 1)])
    sT = np.maximum.accumulate([trace_norm(domain, traj.T[n], q) ** q for n in range(last + 1)])
    R = {
        "v": float(Wv[-1] ** (1 / p)),
        "T": float(WT[-1] ** (1 / q)),
        "pi": max(w1p_norm(domain, traj.pi[n], p) for n in range(last + 1)),
        "sigma": max(lp_norm(domain, traj.sigma[n], p, mass) for n in range(last + 1)),
    }
    return NormReport(p, q, fields, (Wv + sv).tolist(), (WT + sT).tolist(), R)


# ---------------------------------------------------------------- traces

@dataclass
class FixedPointTrace:
    level: str
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged_in: int | None = None
    extra: list = field(default_factory=list)

    noise_floor: float = 1e-13

    def record(self, d, **info):
        if self.distances and self.distances[-1] > self.noise_floor:
            self.ratios.append(d / self.distances[-1])
        self.distances.append(float(d))
        self.extra.append(info)

    @property
    def factor(self):
        """Largest measured contraction ratio (0 if the first pass was already exact)."""
        return max(self.ratios) if self.ratios else 0.0

    def as_dict(self):
        return {"level": self.level, "distances": self.distances, "ratios": self.ratios,
                "converged_in": self.converged_in, "factor": self.factor}


def _converged_index(distances, tol):
    """Index of the first iterate whose successor moved by at most tol (1-based)."""
    for k, d in enumerate(distances):
        if d <= tol:
            return max(k, 1)
    return None


# ---------------------------------------------------------------- inner loop

def _sigma_mass(sigma, mass):
    return mass.integrate(sigma)


def inner_fixed_point(problem: CoupledProblem, v_bar, T_bar, rho=None, pi_bar=None, sigma_bar=None,
                      nsteps=None, tol=None, max_iters=None):
    """Iterate (pi, sigma) over the horizon with sources frozen at the previous iterate."""
    pr = problem
    s0 = pr.initial
    nsteps = v_bar.shape[0] - 1 if nsteps is None else nsteps
    tol = pr.inner_tol if tol is None else tol
    max_iters = pr.inner_max if max_iters is None else max_iters
    sw = pr.couplings.spectrum
    if pi_bar is None:
        pi_bar = np.repeat(s0.pi[None], nsteps + 1, axis=0)
    if sigma_bar is None:
        sigma_bar = np.repeat(s0.sigma[None], nsteps + 1, axis=0)
    trace = FixedPointTrace("inner")
    beta = micro.kernel_matrix(pr.micro, pr.mass)
    dt = pr.dt
    converged = False
    for _ in range(max_iters):
        pi = np.empty_like(pi_bar)
        sig = np.empty_like(sigma_bar)
        pi[0], sig[0] = s0.pi, s0.sigma
        for n in range(nsteps):
            pi[n + 1] = gas.vapor_step(pr.domain, pi[n], v_bar[n], dt, pr.micro, pr.mass,
                                       T_bar[n], pi_bar[n], sigma_bar[n], condensation=sw.condensation)
            sig[n + 1] = micro.spectrum_step(sig[n], dt, pr.micro, pr.mass, T_bar[n], pi_bar[n],
                                             sigma_lag=sigma_bar[n], domain=pr.domain, v=v_bar[n],
                                             phi=pr.phi, switches=sw, beta=beta)
        p = pr.p
        dist = max(lp_norm(pr.domain, pi[n] - pi_bar[n], p)
                   + lp_norm(pr.domain, sig[n] - sigma_bar[n], p, pr.mass) for n in range(nsteps + 1))
        scale = max(lp_norm(pr.domain, pi[n], p) + lp_norm(pr.domain, sig[n], p, pr.mass)
                    for n in range(nsteps + 1))
        trace.record(dist / scale if scale > 0 else dist)
        pi_bar, sigma_bar = pi, sig
        if trace.ratios and trace.ratios[-1] >= 1.0:
            raise HorizonTooLarge(f"inner contraction ratio {trace.ratios[-1]:.4g} >= 1", trace)
        if trace.distances[-1] <= tol:
            converged = True
            break
    if not converged:
        raise IterationLimit(f"inner loop exceeded {max_iters} iterations", trace)
    trace.converged_in = _converged_index(trace.distances, tol)
    return pi_bar, sigma_bar, trace


# ---------------------------------------------------------------- outer loop

def _outer_distance(domain, v, v_bar, T, T_bar, dt):
    Dv, DT = v - v_bar, T - T_bar
    sup_l2 = max(l2_norm(domain, Dv[n]) + l2_norm(domain, DT[n]) for n in range(len(v)))
    h1 = math.sqrt(sum(dt * (h1_norm(domain, Dv[n]) ** 2 + h1_norm(domain, DT[n]) ** 2)
                       for n in range(1, len(v))))
    scale = max(l2_norm(domain, v[n]) + l2_norm(domain, T[n]) for n in range(len(v)))
    return (sup_l2 + h1) / scale if scale > 0 else sup_l2 + h1


def outer_fixed_point(problem: CoupledProblem, nsteps: int, tol=None, max_iters=None, validate=True,
                      log=None):
    """Iterate (v, T) over ``nsteps`` steps of size dt; returns (trajectory, outer trace, inner traces)."""
    pr = problem
    tol = pr.outer_tol if tol is None else tol
    max_iters = pr.outer_max if max_iters is None else max_iters
    s0 = pr.initial
    d, mass = pr.domain, pr.mass
    cp = pr.couplings
    hyp = None
    if validate and cp.radiation:
        hyp = rad.validate_hypotheses(rad.Medium(s0.rho, s0.pi, s0.sigma), pr.optics, d,
                                      pr.quadrature, mass, pr.eps1, pr.eps2, pr.line_step)
    L = nsteps + 1
    v_bar = np.repeat(s0.v[None], L, axis=0)
    T_bar = np.repeat(s0.T[None], L, axis=0)
    pi_bar = sigma_bar = None
    I_prev = [None] * L
    outer = FixedPointTrace("outer")
    inner_traces = []
    T_bounds = (float(s0.T.min()), float(s0.T.max()))
    rad_diag = []
    traj = None
    converged = False
    for it in range(1, max_iters + 1):
        rho = np.empty((L, d.n_cells))
        rho[0] = s0.rho
        for n in range(nsteps):
            rho[n + 1] = gas.advect_density(d, rho[n], v_bar[n], pr.dt)
        pi, sig, itr = inner_fixed_point(pr, v_bar, T_bar, rho, pi_bar, sigma_bar, nsteps)
        inner_traces.append(itr)
        pi_bar, sigma_bar = pi, sig

        divE = np.zeros((L, d.n_cells))
        H = np.zeros((L, d.n_cells))
        Is = [None] * L
        sweeps = []
        if cp.radiation:
            model = pr.radiation_model
            for n in range(1, L):
                op = model.build(rad.Medium(rho[n], pi[n], sig[n]), T_bar[n], T_bounds)
                I, rd = rad.solve_radiation(op, pr.rad_tol, pr.rad_max_sweeps, I_prev[n], hyp)
                divE[n] = rad.flux_divergence(op, I)
                Is[n] = I
                sweeps.append(rd.sweeps)
                rad_diag.append({"outer_pass": it, "level": n, "eps_b": rd.eps_b, "sweeps": rd.sweeps,
                                 "max_ratio": max(rd.ratios) if rd.ratios else 0.0,
                                 "sup_I": rd.sup_I, "sup_bound": rd.sup_bound})
        I_prev = Is
        if cp.latent_heat and cp.spectrum.condensation and pr.micro.K1 > 0:
            for n in range(1, L):
                theta = micro.condensation_limiter(sig[n], pr.micro, mass, pr.dt)
                H[n] = theta * micro.bulk_exchange(T_bar[n], pi[n], sig[n], pr.micro, mass)

        v = np.empty_like(v_bar)
        T = np.empty_like(T_bar)
        v[0], T[0] = s0.v, s0.T
        for n in range(nsteps):
            m1 = n + 1
            if cp.momentum:
                v[m1] = gas.momentum_step(d, rho[m1], pi[m1], _sigma_mass(sig[m1], mass), v[n],
                                          v_bar[m1], T_bar[m1], pr.phi, pr.dt, pr.phys)
            else:
                v[m1] = v[n]
            if cp.temperature:
                T[m1] = gas.temperature_step(d, rho[m1], pi[m1], T[n], v_bar[m1], T_bar[m1], pr.dt,
                                             pr.phys, divE=divE[m1], H_gl=H[m1], L_gl=pr.micro.L_gl)
            else:
                T[m1] = T[n]
        dist = _outer_distance(d, v, v_bar, T, T_bar, pr.dt)
        outer.record(dist, inner_converged_in=itr.converged_in, inner_factor=itr.factor,
                     radiation_sweeps=sweeps)
        if log is not None:
            log({"event": "outer_pass", "pass": it, "distance": dist,
                 "ratio": outer.ratios[-1] if len(outer.distances) > 1 and outer.ratios else None,
                 "inner_passes": len(itr.distances), "inner_factor": itr.factor})
        v_bar, T_bar = v, T
        traj = Trajectory(pr.dt, rho, pi, sig, v, T, divE, H, Is)
        if outer.ratios and outer.ratios[-1] >= 1.0:
            raise HorizonTooLarge(f"outer contraction factor {outer.ratios[-1]:.4g} >= 1", outer)
        if dist <= tol:
            converged = True
            break
    if not converged:
        raise IterationLimit(f"outer loop exceeded {max_iters} iterations", outer)
    outer.converged_in = _converged_index(outer.distances, tol)
    report = apriori_monitor(traj, s0, mass, d)
    if not report["ok"]:
        raise HorizonTooLarge(f"a-priori bound breached: {report['violations'][0]}", outer)
    return traj, outer, inner_traces, {"hypotheses": None if hyp is None else hyp.as_dict(),
                                      "radiation": rad_diag, "apriori": report}


def inner_factor(inner_traces):
    return max((t.factor for t in inner_traces), default=0.0)


@dataclass
class HorizonResult:
    nsteps: int
    horizon: float
    trajectory: Trajectory
    outer: FixedPointTrace
    inner: list
    diagnostics: dict
    history: list


def adapt_horizon(problem: CoupledProblem, nsteps: int, kappa_target=0.9, inner_target=0.5, log=None):
    """Halve the number of steps until inner factor < inner_target and outer factor < kappa_target."""
    if nsteps < 1:
        raise ValueError("initial horizon must contain at least one step")
    if not 0 < kappa_target < 1:
        raise ValueError("kappa_target must lie in ]0, 1[")
    history = []
    n = int(nsteps)
    while n >= 1:
        try:
            traj, outer, inner, diag = outer_fixed_point(problem, n, log=log)
            fi, fo = inner_factor(inner), outer.factor
            ok = fi < inner_target and fo < kappa_target
            history.append({"nsteps": n, "horizon": n * problem.dt, "inner_factor": fi,
                            "outer_factor": fo, "accepted": ok})
            if ok:
                return HorizonResult(n, n * problem.dt, traj, outer, inner, diag, history)
        except HorizonTooLarge as exc:
            history.append({"nsteps": n, "horizon": n * problem.dt, "accepted": False, "reason": str(exc)})
        if log is not None:
            log({"event": "horizon_rejected", **history[-1]})
        n //= 2
    raise NoAdmissibleHorizon("no admissible horizon at this resolution", history)


# ---------------------------------------------------------------- a-priori bounds

def apriori_monitor(traj: Trajectory, s0: State, mass: MassGrid, domain: Domain | None = None):
    """Check the computable two-sided bounds at every level; report norm curves.

    Hard bounds: rho in [inf rho0 / 2, 2 sup rho0], pi in [0, sup pi0 + 1],
    T > 0, v = 0 on boundary cells (when ``domain`` is given), droplet
    support inside ]m_a/2, M1[.
    """
    lo_r, hi_r = 0.5 * float(s0.rho.min()), 2.0 * float(s0.rho.max())
    hi_p = float(s0.pi.max()) + 1.0
    violations = []
    per_step = []
    sig0 = float(np.abs(s0.sigma).max(initial=0.0))
    for n in range(traj.nsteps + 1):
        r, p, T = traj.rho[n], traj.pi[n], traj.T[n]
        checks = {
            "rho_lower": float(r.min()) >= lo_r,
            "rho_upper": float(r.max()) <= hi_r,
            "pi_lower": float(p.min()) >= 0.0,
            "pi_upper": float(p.max()) <= hi_p,
            "T_positive": float(T.min()) > 0.0,
        }
        s = traj.sigma[n]
        per_bin = (s * mass.widths[:, None]).sum(axis=1)
        total = float(per_bin.sum())
        bad = ~mass.allowed
        checks["sigma_support"] = total == 0 or float(per_bin[bad].sum()) <= 1e-12 * total
        checks["sigma_nonneg"] = float(s.min(initial=0.0)) >= 0.0
        if domain is not None:
            checks["v_boundary_zero"] = not np.any(traj.v[n][domain.boundary])
        for k, ok in checks.items():
            if not ok:
                violations.append(f"{k} at step {n}")
        per_step.append({"step": n, "rho_min": float(r.min()), "rho_max": float(r.max()),
                         "pi_min": float(p.min()), "pi_max": float(p.max()), "T_min": float(T.min()),
                         "sigma_sup": float(np.abs(s).max(initial=0.0)),
                         "sigma_sup_margin": sig0 + 1.0 - float(np.abs(s).max(initial=0.0))})
    return {"ok": not violations, "violations": violations, "steps": per_step,
            "bounds": {"rho": [lo_r, hi_r], "pi": [0.0, hi_p]}}


def boundary_velocity_max(domain: Domain, traj: Trajectory):
    return float(np.abs(traj.v[:, domain.boundary]).max(initial=0.0))
