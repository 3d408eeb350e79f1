"""End-to-end acceptance criteria, one printed PASS/FAIL line each.

Every test computes its measurement first, emits the line, then asserts, so
a failing criterion is still reported with its measured value.
"""
import dataclasses as dc
import json
import math
from pathlib import Path

import numpy as np
import pytest

from cloudrad import gasdynamics as gas
from cloudrad import microphysics as micro
from cloudrad.cli import main
from cloudrad.config import build_problem, preset_config
from cloudrad.coupling import adapt_horizon, inner_factor, outer_fixed_point
from cloudrad.domain import (AngularQuadrature, DomainConfig, MassGrid, WavelengthBands,
                             angular_quadrature, build_domain, exit_distance)
from cloudrad.radiation import (BoundaryIntensity, Medium, OpticalCoefficients, PlanckConstants,
                                RadiationModel, band_planck, flux_divergence,
                                geometric_functionals, geometric_inequality_check, picard_sweep,
                                solve_radiation, validate_hypotheses)

import mms
from oracles import geometric_lhs_monte_carlo, slab_intensity, stefan_boltzmann_si

GRAY = WavelengthBands(np.array([0.0, np.inf]))
ND = PlanckConstants.nondimensional()
GOLDEN = Path(__file__).with_name("golden") / "full_desk_traces.jsonl"


def _problem(name, **sections):
    cfg = preset_config(name)
    for sec, kw in sections.items():
        cfg = dc.replace(cfg, **{sec: dc.replace(getattr(cfg, sec), **kw)})
    return build_problem(cfg)


# ---------------------------------------------------------------- 1

def test_radiation_contraction(emit):
    rng = np.random.default_rng(2024)
    mass = MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)
    domains = [build_domain(DomainConfig("box", 8)), build_domain(DomainConfig("ball", 8))]
    worst_margin, worst_bound, solved, rejected, ok = -np.inf, -np.inf, 0, 0, True
    # ranges reach up to the admissibility edge: roughly 1 in 40 draws is rejected
    while solved < 20 and rejected < 200:
        d = domains[solved % 2]
        quad = angular_quadrature(1 + solved % 2)
        n = d.n_cells
        co = OpticalCoefficients.uniform(1, mass.n_bins, a1=rng.uniform(0, 0.15), r1=rng.uniform(0, 0.1),
                                         a2=rng.uniform(0, 3), r2=rng.uniform(0, 3),
                                         a3=rng.uniform(0, 2), r3=rng.uniform(0, 2))
        sig = rng.uniform(0, 1, (mass.n_bins, n)) * (mass.allowed[:, None] * rng.uniform(0, 2e-3))
        med = Medium(rng.uniform(0.5, 1.5, n), rng.uniform(0, 0.02, n), sig)
        rep = validate_hypotheses(med, co, d, quad, mass, raise_on_failure=False)
        if not rep.passed:
            rejected += 1
            continue
        I0 = rng.uniform(0, 2)
        model = RadiationModel(d, quad, GRAY, mass, co, BoundaryIntensity.constant([I0]), ND)
        T = rng.uniform(0.6, 1.4, n)
        op = model.build(med, T)
        I, diag = solve_radiation(op, tol=1e-10, hypotheses=rep)
        B_sup = float(band_planck(GRAY, np.asarray(T.max()), ND)[0])
        bound = (I0 + B_sup) / diag.eps_b
        ratio = max(diag.ratios) if diag.ratios else 0.0
        worst_margin = max(worst_margin, ratio - (1 - diag.eps_b))
        worst_bound = max(worst_bound, float(I.max()) / bound)
        ok &= bool(diag.converged) and ratio <= (1 - diag.eps_b) + 0.01 and float(I.max()) <= bound
        solved += 1
    ok &= solved == 20
    emit(1, "radiation contraction", ok,
         f"{solved} settings ({rejected} inadmissible draws skipped); max ratio - (1 - eps_b) = {worst_margin:.3e} "
         f"(limit 0.01); max sup I / bound = {worst_bound:.4f} (limit 1)")
    assert ok


# ---------------------------------------------------------------- 2

def test_slab_oracle_and_detailed_balance(emit):
    d = build_domain(DomainConfig("box", 8))
    mass = MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)
    quad = angular_quadrature(2)
    a, I0, Tval = 2.0, 0.3, 1.3
    co = OpticalCoefficients.uniform(1, mass.n_bins, a1=a)
    model = RadiationModel(d, quad, GRAY, mass, co, BoundaryIntensity.constant([I0]), ND, line_step=0.25)
    n = d.n_cells
    op = model.build(Medium(np.ones(n), np.zeros(n), np.zeros((mass.n_bins, n))), np.full(n, Tval))
    I, _ = solve_radiation(op, tol=1e-13)
    B = float(band_planck(GRAY, np.asarray(Tval), ND)[0])
    rel = 0.0
    for j, q in enumerate(quad.nodes):
        path = -exit_distance(d, d.centers, np.broadcast_to(q, d.centers.shape))
        ref = slab_intensity(B, I0, a, path)
        rel = max(rel, float(np.max(np.abs(I[0, j] - ref) / ref)))

    Bb = float(band_planck(GRAY, np.asarray(0.9), ND)[0])
    co2 = OpticalCoefficients.uniform(1, mass.n_bins, a1=3.0, r1=1.0, a2=40.0, r2=10.0, a3=5.0, r3=2.0)
    model2 = RadiationModel(d, quad, GRAY, mass, co2, BoundaryIntensity.constant([Bb]), ND)
    rng = np.random.default_rng(3)
    med = Medium(rng.uniform(0.5, 1.5, n), rng.uniform(0, 0.02, n), rng.uniform(0, 1e-2, (mass.n_bins, n)))
    op2 = model2.build(med, np.full(n, 0.9))
    I2, _ = solve_radiation(op2, tol=1e-13)
    fp = float(np.max(np.abs(I2 - Bb)) / Bb)
    div = float(np.max(np.abs(flux_divergence(op2, I2))))
    ok = rel <= 1e-6 and fp <= 1e-9 and div <= 1e-9
    emit(2, "analytic slab oracle", ok,
         f"slab max rel error {rel:.2e} (limit 1e-6); isothermal |I - B|/B {fp:.2e} (1e-9); "
         f"max |div E| {div:.2e} (1e-9)")
    assert ok


# ---------------------------------------------------------------- 3

def test_two_cell_dense_solve(emit):
    d = build_domain(DomainConfig("box", (2, 1, 1)))
    quad = AngularQuadrature(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.full(2, 2 * math.pi))
    mass = MassGrid.geometric(4, 1.0, 2.0, 8.0, 64.0, 16.0)
    co = OpticalCoefficients.uniform(1, mass.n_bins, a1=1.0, r1=2.0)
    model = RadiationModel(d, quad, GRAY, mass, co, BoundaryIntensity.constant([0.3]), ND)
    op = model.build(Medium(np.array([1.0, 0.6]), np.zeros(2), np.zeros((mass.n_bins, 2))),
                     np.array([1.0, 1.4]))
    c = picard_sweep(op, np.zeros(op.shape)).ravel()
    M = np.column_stack([picard_sweep(op, np.eye(4)[k].reshape(op.shape)).ravel() - c for k in range(4)])
    direct = np.linalg.solve(np.eye(4) - M, c)
    I, diag = solve_radiation(op, tol=1e-14)
    err = float(np.max(np.abs(I.ravel() - direct)))
    ok = err <= 1e-8
    emit(3, "two-cell dense solve", ok, f"max |Picard - direct| = {err:.2e} (limit 1e-8), {diag.sweeps} sweeps")
    assert ok


# ---------------------------------------------------------------- 4

def test_geometric_inequality(emit):
    d = build_domain(DomainConfig("ball", 12))
    quad = angular_quadrature(1)
    fun = geometric_functionals(d, quad)
    rng = np.random.default_rng(44)
    n = d.n_cells
    fields = np.column_stack(
        [rng.uniform(0, 1, n) for _ in range(20)]
        + [rng.uniform(0, 1, n) * (rng.uniform(size=n) < 0.05) for _ in range(15)]
        + [np.exp(-((d.centers - rng.uniform(-0.3, 0.3, 3)) ** 2).sum(1) / rng.uniform(0.005, 0.1))
           for _ in range(15)])
    lhs, rhs = geometric_inequality_check(d, quad, fields, functionals=fun, slack=np.inf)
    worst = float(np.max(lhs / rhs))
    phi = 1 + 0.5 * np.cos(4 * d.centers[:, 0] + 1) * np.cos(3 * d.centers[:, 1]) + 0.3 * d.centers[:, 2]
    ql, _ = geometric_inequality_check(d, quad, phi, functionals=fun)
    mc, se = geometric_lhs_monte_carlo(d, phi, np.random.default_rng(5), n=10**6)
    z = abs(ql - mc) / se
    ok = worst <= 1.05 and z <= 3
    emit(4, "geometric inequality", ok,
         f"50 fields, max lhs/rhs = {worst:.4f} (limit 1.05); quadrature vs Monte Carlo "
         f"{ql:.6f} vs {mc:.6f}, {z:.2f} standard errors (limit 3)")
    assert ok


# ---------------------------------------------------------------- 5

def test_coagulation_conservation(emit):
    mass = MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)
    params = micro.MicroParams(beta0=1.0, M_cut=16.0)
    rng = np.random.default_rng(5)
    worst, gain_above = 0.0, 0.0
    for _ in range(100):
        sig = rng.uniform(0, 1, (mass.n_bins, 3)) * mass.allowed[:, None] * rng.uniform(1e-4, 1.0)
        sig *= rng.uniform(size=sig.shape) < 0.7
        B1, B2 = micro.coagulation(sig, params, mass)
        net = np.abs(mass.widths @ (B1 + B2))
        scale = mass.widths @ np.abs(B1)
        worst = max(worst, float(np.max(net / np.where(scale > 0, scale, 1.0))))
        gain_above = max(gain_above, float(np.abs(B2[mass.centers >= params.M_cut]).max(initial=0.0)))

    from oracles import coagulation_by_hand
    um = MassGrid.uniform(1.0, 24, 1.0, 2.0, 8.0, 16.0)
    s = np.zeros(um.n_bins)
    s[2], s[3] = 0.4, 0.7
    p2 = micro.MicroParams(beta0=1.5, M_cut=16.0)
    B1, B2 = micro.coagulation(s[:, None], p2, um)
    o1, o2 = coagulation_by_hand(s, um.centers, um.widths, 1.5)
    hand = float(max(np.abs(B1[:, 0] - o1).max(), np.abs(B2[:, 0] - o2).max()))
    ok = worst <= 1e-10 and gain_above == 0.0 and hand <= 1e-15
    emit(5, "coagulation conservation", ok,
         f"max relative mass residual {worst:.2e} (limit 1e-10); max gain at m >= M {gain_above:.1e}; "
         f"hand oracle deviation {hand:.1e}")
    assert ok


# ---------------------------------------------------------------- 6

def test_water_exchange_identity(emit):
    d = build_domain(DomainConfig("box", 4))
    mass = MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)
    params = micro.MicroParams(K1=300.0, N_star=1e-3)
    sw = micro.SpectrumSwitches(condensation=True, coagulation=False, nucleation=False, removal=False,
                                transport=False)
    rng = np.random.default_rng(6)
    n = d.n_cells
    shape = np.where(mass.allowed & (mass.centers > 1) & (mass.centers < 8), 1.0, 0.0)
    sig = 1e-3 * shape[:, None] * rng.uniform(0.5, 1.5, n)[None] / (mass.widths @ shape)
    T0 = rng.uniform(0.97, 1.03, n)
    pi = micro.saturation_density(T0, params) * rng.uniform(0.98, 1.02, n)
    v = np.zeros((n, 3))
    dt = 0.01

    def total(pi, sig):
        return d.cell_volume * (pi.sum() + mass.integrate(sig).sum())

    worst, evap, cond = 0.0, 0, 0
    w = total(pi, sig)
    for k in range(100):
        T = T0 * (1 + 0.02 * math.sin(0.2 * k))  # drive the cells through both regimes
        H = micro.bulk_exchange(T, pi, sig, params, mass)
        evap += int((H < 0).sum())
        cond += int((H > 0).sum())
        pi_new = gas.vapor_step(d, pi, v, dt, params, mass, T, pi, sig)
        sig = micro.spectrum_step(sig, dt, params, mass, T, pi, sigma_lag=sig, switches=sw)
        pi = pi_new
        w_new = total(pi, sig)
        worst = max(worst, abs(w_new - w) / w)
        w = w_new
    ok = worst <= 1e-8 and evap > 0 and cond > 0
    emit(6, "water exchange identity", ok,
         f"max per-step relative drift {worst:.2e} over 100 steps (limit 1e-8); "
         f"{cond} condensing and {evap} evaporating cell-steps")
    assert ok


# ---------------------------------------------------------------- 7, 11 share the desk run

@pytest.fixture(scope="module")
def desk():
    pr = _problem("full_desk")
    return pr, adapt_horizon(pr, preset_config("full_desk").loop.nsteps)


def test_support_and_positivity(emit, desk):
    pr, res = desk
    traj, rep = res.trajectory, res.diagnostics["apriori"]
    mass, s0 = pr.mass, pr.initial
    guard = []
    for n in range(traj.nsteps + 1):
        per_bin = (traj.sigma[n] * mass.widths[:, None]).sum(1)
        guard.append(float(per_bin[~mass.allowed].sum() / per_bin.sum()))
    rho_lo = float(traj.rho.min()) / (0.5 * s0.rho.min())
    rho_hi = float(traj.rho.max()) / (2 * s0.rho.max())
    pi_ok = float(traj.pi.min()) >= 0 and float(traj.pi.max()) <= float(s0.pi.max()) + 1
    T_min = float(traj.T.min())
    vb = float(np.abs(traj.v[:, pr.domain.boundary]).max())
    ok = (rep["ok"] and max(guard) <= 1e-12 and rho_lo >= 1 and rho_hi <= 1 and pi_ok and T_min > 0
          and vb == 0.0)
    emit(7, "support and positivity", ok,
         f"{traj.nsteps} steps, {len(rep['violations'])} violations; guard-bin mass fraction "
         f"{max(guard):.1e} (1e-12); rho/lower {rho_lo:.3f}, rho/upper {rho_hi:.3f}; T min {T_min:.4f}; "
         f"max |v| on boundary {vb:.1e}")
    assert ok


# ---------------------------------------------------------------- 8

def test_dry_air_mass(emit):
    rng = np.random.default_rng(8)
    worst = 0.0
    for shape in ("box", "ball"):
        d = build_domain(DomainConfig(shape, 10))
        for _ in range(10):
            v = rng.normal(size=(d.n_cells, 3)) * rng.uniform(0.05, 1.0)
            v[d.boundary] = 0.0
            dt = 0.5 * d.h / max(float(np.abs(v).max()) * 3, 1e-12)
            rho = rng.uniform(0.5, 1.5, d.n_cells)
            m0 = rho.sum()
            for _ in range(5):
                rho = gas.advect_density(d, rho, v, dt)
                m1 = rho.sum()
                worst = max(worst, abs(m1 - m0) / m0)
                m0 = m1
    ok = worst <= 1e-12
    emit(8, "dry-air mass", ok, f"max per-step relative change {worst:.2e} over 100 steps (limit 1e-12)")
    assert ok


# ---------------------------------------------------------------- 9

def test_parabolic_convergence(emit):
    sv = mms.orders(mms.velocity_space_errors((8, 16, 32)))
    sT = mms.orders(mms.temperature_space_errors((8, 16, 32)))
    tT, tv = (mms.orders(e) for e in mms.time_errors((10, 20, 40)))
    ok = min(sv + sT) >= 1.8 and min(tT + tv) >= 0.9
    fmt = lambda o: "/".join(f"{x:.2f}" for x in o)
    emit(9, "parabolic convergence", ok,
         f"space orders v {fmt(sv)}, T {fmt(sT)} (>= 1.8); time orders v {fmt(tv)}, T {fmt(tT)} (>= 0.9)")
    assert ok


# ---------------------------------------------------------------- 10

def test_viscous_dissipation(emit):
    P = gas.PhysParams(eta=0.37, zeta=0.21)
    rng = np.random.default_rng(10)
    d = build_domain(DomainConfig("box", 8))
    worst, minimum = 0.0, np.inf
    for _ in range(100):
        v = rng.normal(size=(d.n_cells, 3))
        a = gas.viscous_dissipation(d, v, P)
        b = gas.viscous_dissipation_unsymmetrized(d, v, P)
        worst = max(worst, float(np.max(np.abs(a - b)) / np.max(np.abs(b))))
        minimum = min(minimum, float(a.min()))
    rot = 0.0
    for shape in ("box", "ball"):
        dd = build_domain(DomainConfig(shape, 8))
        for ax in range(3):
            w = np.zeros(3)
            w[ax] = 1.0
            rot = max(rot, float(np.abs(gas.viscous_dissipation(dd, np.cross(w, dd.centers), P)).max()))
    ok = worst <= 1e-12 and minimum >= 0 and rot == 0.0
    emit(10, "viscous dissipation", ok,
         f"100 fields: max relative difference {worst:.1e} (1e-12), min value {minimum:.3e}; "
         f"rigid rotation max {rot:.1e}")
    assert ok


# ---------------------------------------------------------------- 11

def test_nested_fixed_points(emit, desk):
    one_pass = []
    off = {"radiation": False, "momentum": False, "temperature": False, "latent_heat": False}
    water_off = {"K1": 0.0, "beta0": 0.0, "g0_amp": 0.0, "g1_amp": 0.0}
    for pr in (_problem("rest_state"), _problem("full_desk", loop=off, micro=water_off)):
        _, outer, inner, _ = outer_fixed_point(pr, 10)
        one_pass.append(outer.converged_in == 1 and all(t.converged_in == 1 for t in inner))
    pr, res = desk
    fi, fo = inner_factor(res.inner), res.outer.factor
    _, outer_h, inner_h, _ = outer_fixed_point(pr, res.nsteps // 2)
    fi_h, fo_h = inner_factor(inner_h), outer_h.factor
    ok = all(one_pass) and fi < 0.5 and fo < 1 and fi_h < fi and fo_h < fo
    emit(11, "nested fixed points", ok,
         f"decoupled one-pass {one_pass}; full_desk accepted at {res.nsteps} steps with inner {fi:.4g} (< 0.5), "
         f"outer {fo:.4g} (< 1); at half horizon inner {fi_h:.4g}, outer {fo_h:.4g}")
    assert ok


# ---------------------------------------------------------------- 12

def test_planck_integral(emit):
    bands = WavelengthBands(np.geomspace(1e-7, 1e-2, 5), 16)
    sigma = stefan_boltzmann_si()
    errs = []
    for T in (200.0, 300.0, 400.0):
        total = float(band_planck(bands, np.asarray(T), PlanckConstants()).sum())
        errs.append(abs(total - sigma * T**4) / (sigma * T**4))
    ok = max(errs) <= 5e-3
    emit(12, "Planck integral", ok,
         "relative errors at 200/300/400 K: " + ", ".join(f"{e:.2e}" for e in errs) + " (limit 5e-3)")
    assert ok


# ---------------------------------------------------------------- 13

def _numbers(obj):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _numbers(obj[k])
    elif isinstance(obj, list):
        for x in obj:
            yield from _numbers(x)
    else:
        yield obj


def test_determinism_against_golden(emit, tmp_path):
    runs = {}
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        code = main(["run", "full_desk", "--out", str(out), "--threads", str(threads)])
        assert code == 0
        runs[threads] = (out / "traces.jsonl").read_bytes()
    golden = GOLDEN.read_bytes()
    bitwise = runs[1] == golden
    worst = 0.0
    a = [json.loads(l) for l in golden.decode().splitlines()]
    b = [json.loads(l) for l in runs[3].decode().splitlines()]
    same_shape = len(a) == len(b)
    for ra, rb in zip(a, b):
        xa, xb = list(_numbers(ra)), list(_numbers(rb))
        same_shape &= len(xa) == len(xb)
        for p, q in zip(xa, xb):
            if isinstance(p, float) and isinstance(q, float):
                worst = max(worst, abs(p - q) / max(abs(p), 1e-300) if p != q else 0.0)
            else:
                same_shape &= p == q
    ok = bitwise and same_shape and worst <= 1e-12
    emit(13, "determinism", ok,
         f"threads=1 bitwise equal to archived trace: {bitwise}; threads=3 max relative deviation "
         f"{worst:.1e} (limit 1e-12), structure identical: {same_shape}")
    assert ok
