import dataclasses as dc
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudrad import coupling
from cloudrad.config import build_problem, preset_config
from cloudrad.coupling import (FixedPointTrace, HorizonTooLarge, IterationLimit, NoAdmissibleHorizon,
                               Trajectory, adapt_horizon, apriori_monitor, inner_factor,
                               inner_fixed_point, lp_norm, norm_estimators, outer_fixed_point,
                               w1p_norm)
from cloudrad.domain import BOX_EDGE, DomainConfig, MassGrid, build_domain


def problem(name, **sections):
    """Preset problem with selected section fields overridden: problem("x", micro={"K1": 1})."""
    cfg = preset_config(name)
    for sec, kw in sections.items():
        cfg = dc.replace(cfg, **{sec: dc.replace(getattr(cfg, sec), **kw)})
    return build_problem(cfg)


def frozen_inner(pr, nsteps):
    L = nsteps + 1
    v = np.repeat(pr.initial.v[None], L, axis=0)
    T = np.repeat(pr.initial.T[None], L, axis=0)
    rho = np.repeat(pr.initial.rho[None], L, axis=0)
    return inner_fixed_point(pr, v, T, rho, nsteps=nsteps)


# ---------------------------------------------------------------- norms

def _zero_traj(d, mass, levels=3):
    N = d.n_cells
    z = np.zeros((levels, N))
    return Trajectory(0.1, z.copy(), z.copy(), np.zeros((levels, mass.n_bins, N)),
                      np.zeros((levels, N, 3)), z.copy(), z.copy(), z.copy())


def test_norms_of_zero_fields_vanish(box4, mass24):
    rep = norm_estimators(box4, _zero_traj(box4, mass24), mass24)
    for vals in rep.fields.values():
        assert all(x == 0.0 for x in vals.values())
    assert all(x == 0.0 for x in rep.V_pv + rep.V_qT)
    assert all(x == 0.0 for x in rep.R.values())


@pytest.mark.parametrize("p", [2.0, 3.5, 5.0])
def test_lp_norm_of_constant(box8, p):
    c = 2.5
    expected = c * (BOX_EDGE**3) ** (1 / p)
    assert math.isclose(lp_norm(box8, np.full(box8.n_cells, c), p), expected, rel_tol=1e-12)


def _separable_w1p(p, k):
    """Analytic W^1_p of f = prod c(x_i), c(s) = 1 + 0.5 sin(k s), on the centered box."""
    from scipy.integrate import quad
    h = BOX_EDGE / 2
    a = quad(lambda s: abs(1 + 0.5 * math.sin(k * s)) ** p, -h, h, limit=200)[0]
    b = quad(lambda s: abs(0.5 * k * math.cos(k * s)) ** p, -h, h, limit=200)[0]
    return (a**3 + 3 * b * a * a) ** (1 / p)


def test_w1p_of_smooth_field_converges_to_analytic():
    p, k = 5.0, math.pi / BOX_EDGE
    exact = _separable_w1p(p, k)
    errs = []
    for n in (8, 16):
        d = build_domain(DomainConfig("box", n))
        f = np.prod(1 + 0.5 * np.sin(k * d.centers), axis=1)
        errs.append(abs(w1p_norm(d, f, p) - exact) / exact)
    print(f"W1p relative error 8^3={errs[0]:.3e} 16^3={errs[1]:.3e}")
    assert errs[0] <= 0.05
    assert errs[1] < errs[0]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), levels=st.integers(2, 5))
def test_norm_report_nonnegative_and_monotone(seed, levels):
    rng = np.random.default_rng(seed)
    d = build_domain(DomainConfig("box", 4))
    mass = MassGrid.uniform(1.0, 6, 1.0, 2.0, 4.0, 8.0)
    N = d.n_cells
    tr = Trajectory(0.05, rng.uniform(0.5, 1.5, (levels, N)), rng.uniform(0, 0.1, (levels, N)),
                    rng.uniform(0, 1, (levels, mass.n_bins, N)), rng.normal(size=(levels, N, 3)),
                    rng.uniform(0.5, 1.5, (levels, N)), np.zeros((levels, N)), np.zeros((levels, N)))
    rep = norm_estimators(d, tr, mass)
    for vals in rep.fields.values():
        assert all(x >= 0 for x in vals.values())
    assert all(x >= 0 for x in rep.R.values())
    assert np.all(np.diff(rep.V_pv) >= 0) and np.all(np.diff(rep.V_qT) >= 0)
    assert rep.as_dict() == norm_estimators(d, tr, mass).as_dict()


# ---------------------------------------------------------------- traces

def test_trace_skips_ratio_below_noise_floor():
    t = FixedPointTrace("x")
    t.record(1.0)
    t.record(0.25)
    t.record(1e-15)
    t.record(1e-16)
    assert t.ratios == [0.25, 4e-15]
    assert t.factor == 0.25
    assert FixedPointTrace("y").factor == 0.0


# ---------------------------------------------------------------- inner loop

DECOUPLED = {"K1": 0.0, "beta0": 0.0, "g0_amp": 0.0, "g1_amp": 0.0}


def test_decoupled_inner_loop_exact_in_one_pass():
    pr = problem("condensation_column", micro=DECOUPLED)
    pi, sig, tr = frozen_inner(pr, 6)
    assert tr.converged_in == 1
    assert tr.factor == 0.0
    assert tr.distances[-1] == 0.0


def test_inner_ratio_linear_in_weak_condensation_rate():
    facs = []
    for K1 in (1.0, 2.0):
        _, _, tr = frozen_inner(problem("condensation_column", micro={"K1": K1}), 10)
        facs.append(tr.factor)
    print(f"inner factor K1=1: {facs[0]:.4e}, K1=2: {facs[1]:.4e}, ratio {facs[1] / facs[0]:.4f}")
    assert 1.6 <= facs[1] / facs[0] <= 2.4


def test_inner_iteration_limit_carries_trace():
    pr = problem("condensation_column")
    with pytest.raises(IterationLimit) as exc:
        L = 5
        inner_fixed_point(pr, np.repeat(pr.initial.v[None], L, 0), np.repeat(pr.initial.T[None], L, 0),
                          nsteps=4, max_iters=1)
    assert len(exc.value.trace.distances) == 1


def test_inner_ratio_at_one_signals_horizon_too_large(monkeypatch):
    pr = problem("condensation_column", micro=DECOUPLED)
    calls = iter([1.0, 2.0, 5.0])
    monkeypatch.setattr(coupling, "lp_norm", lambda *a, **k: next(calls, 5.0))
    with pytest.raises(HorizonTooLarge):
        frozen_inner(pr, 2)


# ---------------------------------------------------------------- outer loop

def test_rest_state_converges_in_one_pass_and_stays_constant():
    pr = problem("rest_state")
    traj, outer, inner, _ = outer_fixed_point(pr, 6)
    assert outer.converged_in == 1 and outer.factor == 0.0
    assert all(t.converged_in == 1 for t in inner) and inner_factor(inner) == 0.0
    s0 = pr.initial
    for n in range(traj.nsteps + 1):
        np.testing.assert_array_equal(traj.rho[n], s0.rho)
        np.testing.assert_array_equal(traj.pi[n], s0.pi)
        np.testing.assert_array_equal(traj.sigma[n], s0.sigma)
        np.testing.assert_array_equal(traj.v[n], s0.v)
        np.testing.assert_array_equal(traj.T[n], s0.T)


def test_radiation_only_relaxes_and_contracts_less_on_shorter_horizon():
    pr = problem("radiation_only")
    f = {}
    for n in (5, 10):
        traj, outer, _, _ = outer_fixed_point(pr, n)
        assert all(r < 1 for r in outer.ratios)
        f[n] = outer.factor
    print(f"radiation_only outer factor: 5 steps {f[5]:.4f}, 10 steps {f[10]:.4f}")
    assert f[5] < f[10] < 1
    # motionless air with emission: temperature moves, velocity does not
    assert np.abs(traj.T[-1] - traj.T[0]).max() > 0
    np.testing.assert_array_equal(traj.v, np.repeat(pr.initial.v[None], traj.nsteps + 1, 0))


def test_outer_iteration_limit():
    pr = problem("condensation_column")
    with pytest.raises(IterationLimit) as exc:
        outer_fixed_point(pr, 3, max_iters=1)
    assert len(exc.value.trace.distances) == 1


def test_solution_invariant_under_doubled_iteration_limits():
    a = problem("condensation_column")
    b = problem("condensation_column", loop={"inner_max": 60, "outer_max": 60})
    ta, _, _, _ = outer_fixed_point(a, 5)
    tb, _, _, _ = outer_fixed_point(b, 5)
    for name in ("rho", "pi", "sigma", "v", "T"):
        x, y = getattr(ta, name), getattr(tb, name)
        assert np.abs(x - y).max() <= 1e-8 * max(1.0, np.abs(x).max())


def test_identical_problems_give_bitwise_identical_runs():
    runs = [outer_fixed_point(problem("condensation_column"), 4) for _ in range(2)]
    (ta, oa, ia, _), (tb, ob, ib, _) = runs
    for name in ("rho", "pi", "sigma", "v", "T", "H_gl"):
        assert np.array_equal(getattr(ta, name), getattr(tb, name))
    assert oa.as_dict() == ob.as_dict()
    assert [t.as_dict() for t in ia] == [t.as_dict() for t in ib]


# ---------------------------------------------------------------- horizon adaptation

def test_uncoupled_preset_needs_no_halving():
    res = adapt_horizon(problem("rest_state"), 8)
    assert res.nsteps == 8 and len(res.history) == 1 and res.history[0]["accepted"]


def _fake_outer(factors):
    def run(problem, n, log=None):
        tr = FixedPointTrace("outer")
        tr.record(1.0)
        tr.record(factors[n])
        inn = FixedPointTrace("inner")
        return None, tr, [inn], {}
    return run


def test_halving_rule_picks_first_admissible_horizon(monkeypatch):
    monkeypatch.setattr(coupling, "outer_fixed_point", _fake_outer({8: 1.3, 4: 0.8, 2: 0.1}))
    res = adapt_horizon(problem("rest_state"), 8)
    assert res.nsteps == 4
    assert [h["accepted"] for h in res.history] == [False, True]
    assert res.history[0]["outer_factor"] == 1.3


def test_inner_target_also_gates_acceptance(monkeypatch):
    def run(problem, n, log=None):
        inn = FixedPointTrace("inner")
        inn.record(1.0)
        inn.record({4: 0.6, 2: 0.4}[n])
        return None, FixedPointTrace("outer"), [inn], {}
    monkeypatch.setattr(coupling, "outer_fixed_point", run)
    assert adapt_horizon(problem("rest_state"), 4).nsteps == 2


def test_no_admissible_horizon_reports_history(monkeypatch):
    def run(problem, n, log=None):
        raise HorizonTooLarge("outer contraction factor 1.5 >= 1")
    monkeypatch.setattr(coupling, "outer_fixed_point", run)
    with pytest.raises(NoAdmissibleHorizon, match="no admissible horizon at this resolution") as exc:
        adapt_horizon(problem("rest_state"), 4)
    assert [h["nsteps"] for h in exc.value.history] == [4, 2, 1]
    assert all("1.5" in h["reason"] for h in exc.value.history)


def test_adapt_horizon_rejects_bad_arguments():
    pr = problem("rest_state")
    with pytest.raises(ValueError):
        adapt_horizon(pr, 0)
    with pytest.raises(ValueError):
        adapt_horizon(pr, 4, kappa_target=1.0)


@pytest.mark.slow
def test_halvings_grow_with_radiative_coupling():
    halvings = []
    for a in (0.02, 0.2, 0.4):
        res = adapt_horizon(problem("radiation_only", optics={"a1": a}), 10)
        halvings.append(len(res.history) - 1)
        assert res.outer.factor < 0.9 and inner_factor(res.inner) < 0.5
    print(f"halvings for absorption 0.02, 0.2, 0.4: {halvings}")
    assert halvings == sorted(halvings) and halvings[-1] > halvings[0]


# ---------------------------------------------------------------- a-priori monitor

def test_rest_state_monitor_constant():
    pr = problem("rest_state")
    traj, _, _, _ = outer_fixed_point(pr, 4)
    rep = apriori_monitor(traj, pr.initial, pr.mass, pr.domain)
    assert rep["ok"] and rep["violations"] == []
    first = {k: v for k, v in rep["steps"][0].items() if k != "step"}
    for s in rep["steps"][1:]:
        assert {k: v for k, v in s.items() if k != "step"} == first


def test_density_above_twice_sup_is_flagged():
    pr = problem("rest_state")
    traj, _, _, _ = outer_fixed_point(pr, 4)
    traj.rho = traj.rho.copy()
    traj.rho[3, 5] = 2.01 * pr.initial.rho.max()
    rep = apriori_monitor(traj, pr.initial, pr.mass, pr.domain)
    assert not rep["ok"]
    assert rep["violations"] == ["rho_upper at step 3"]


def test_boundary_velocity_and_temperature_flags():
    pr = problem("rest_state")
    traj, _, _, _ = outer_fixed_point(pr, 2)
    traj.v = traj.v.copy()
    traj.T = traj.T.copy()
    traj.v[1, np.flatnonzero(pr.domain.boundary)[0], 0] = 1e-3
    traj.T[2, 0] = 0.0
    rep = apriori_monitor(traj, pr.initial, pr.mass, pr.domain)
    assert set(rep["violations"]) == {"v_boundary_zero at step 1", "T_positive at step 2"}


def test_sigma_norm_grows_under_pure_nucleation():
    sw = {"condensation": False, "coagulation": False, "nucleation": True, "removal": False,
          "transport": False}
    # supersaturated vapor and a droplet number below N_star, so nucleation is active
    pr = problem("coagulation_box", micro={**sw, "N_star": 1.0, "g0_amp": 1.0}, initial={"pi": 0.0105})
    traj, _, _, _ = outer_fixed_point(pr, 6)
    norms = [lp_norm(pr.domain, traj.sigma[n], pr.p, pr.mass) for n in range(traj.nsteps + 1)]
    assert np.all(np.diff(norms) >= 0) and norms[-1] > norms[0]
    sups = [s["sigma_sup"] for s in apriori_monitor(traj, pr.initial, pr.mass, pr.domain)["steps"]]
    assert np.all(np.diff(sups) >= 0)
