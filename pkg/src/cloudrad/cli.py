"""Command line entry point: ``cloudrad validate|run|report``.

Exit codes: 0 success, 2 configuration error, 3 a radiation hypothesis
fails, 4 no admissible time horizon, 5 a solve failed.
"""
import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import coupling as cp
from . import gasdynamics as gas
from . import microphysics as micro
from . import radiation as rad

EXIT_OK, EXIT_CONFIG, EXIT_HYPOTHESIS, EXIT_HORIZON, EXIT_SOLVE = 0, 2, 3, 4, 5
OUT_ROOT_ENV = "CLOUDRAD_OUTPUT_ROOT"
SOLVE_ERRORS = (cp.IterationLimit, gas.CFLError, gas.LinearSolveError, gas.TemperatureError,
                rad.RadiationSolveError, micro.SupportError, micro.NegativeDensityError)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


class JsonlWriter:
    def __init__(self, path):
        self.fh = open(path, "w")

    def __call__(self, record):
        self.fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def _load(args):
    cfg = cfgmod.parse_config(args.config)
    if getattr(args, "threads", None):
        cfg.run.threads = args.threads
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _hypothesis_report(problem):
    s0 = problem.initial
    return rad.validate_hypotheses(rad.Medium(s0.rho, s0.pi, s0.sigma), problem.optics, problem.domain,
                                   problem.quadrature, problem.mass, problem.eps1, problem.eps2,
                                   problem.line_step, raise_on_failure=False)


def _print_hypotheses(report, stream=None):
    stream = sys.stdout if stream is None else stream
    for c in report.as_dict()["checks"]:
        mark = "ok  " if c["ok"] else "FAIL"
        print(f"  [{mark}] {c['name']}: {c['lhs']:.6g} vs {c['rhs']:.6g}", file=stream)


def cmd_validate(args):
    cfg = _load(args)
    problem = cfgmod.build_problem(cfg)
    print(f"config {args.config}: parsed ({cfg.name}), {problem.domain.n_cells} cells, "
          f"{problem.mass.n_bins} mass bins, {len(problem.quadrature.weights)} directions, "
          f"{problem.bands.n_bands} band(s)")
    if not problem.couplings.radiation:
        print("radiation disabled; no radiation hypotheses to check")
        return EXIT_OK
    report = _hypothesis_report(problem)
    _print_hypotheses(report)
    return EXIT_OK if report.ok else EXIT_HYPOTHESIS


def _output_dir(args, cfg):
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root if root else cfg.output.directory) / cfg.name


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_fields(out, problem, traj, cadence=1):
    d, mass = problem.domain, problem.mass
    fdir = out / "fields"
    fdir.mkdir(parents=True, exist_ok=True)
    xyz = [[repr(float(a)) for a in c] for c in d.centers]
    steps = sorted(set(range(0, traj.nsteps + 1, max(1, cadence))) | {traj.nsteps})
    for n in steps:
        tag = f"step{n:04d}"
        for name in ("rho", "pi", "T", "divE"):
            f = getattr(traj, name)[n]
            _write_csv(fdir / f"{name}_{tag}.csv", ["cell", "x", "y", "z", "value"],
                       ([i, *xyz[i], repr(float(f[i]))] for i in range(d.n_cells)))
        v = traj.v[n]
        _write_csv(fdir / f"v_{tag}.csv", ["cell", "x", "y", "z", "vx", "vy", "vz"],
                   ([i, *xyz[i], *(repr(float(a)) for a in v[i])] for i in range(d.n_cells)))
        s = traj.sigma[n]
        _write_csv(fdir / f"sigma_{tag}.csv", ["cell", "bin", "mass", "value"],
                   ([i, k, repr(float(mass.centers[k])), repr(float(s[k, i]))]
                    for i in range(d.n_cells) for k in range(mass.n_bins) if s[k, i] != 0.0))
    return steps


def conservation_residuals(problem, traj):
    """Per step change of dry-air mass and of total water (vapor + liquid)."""
    d, mass = problem.domain, problem.mass
    vol = d.cell_volume
    out = []
    for n in range(traj.nsteps + 1):
        air = float(np.sum(traj.rho[n]) * vol)
        water = float((np.sum(traj.pi[n]) + np.sum(mass.integrate(traj.sigma[n]))) * vol)
        rec = {"step": n, "dry_air": air, "water": water}
        if n > 0:
            a0 = float(np.sum(traj.rho[n - 1]) * vol)
            w0 = float((np.sum(traj.pi[n - 1]) + np.sum(mass.integrate(traj.sigma[n - 1]))) * vol)
            rec["dry_air_rel_change"] = abs(air - a0) / a0
            rec["water_rel_change"] = abs(water - w0) / w0 if w0 > 0 else 0.0
        out.append(rec)
    return out


def invariant_status(summary, res):
    ap = res.diagnostics["apriori"]
    checks = {
        "radiation_hypotheses": summary.get("hypotheses", {"passed": True})["passed"],
        "inner_factor_below_half": summary["inner_factor"] < 0.5,
        "outer_factor_below_one": summary["outer_factor"] < 1.0,
        "dry_air_conserved": summary["max_dry_air_rel_change"] <= 1e-12,
    }
    names = ("rho_lower", "rho_upper", "pi_lower", "pi_upper", "T_positive", "sigma_support",
             "sigma_nonneg", "v_boundary_zero")
    for name in names:
        checks[name] = not any(v.startswith(name + " ") for v in ap["violations"])
    return checks


def cmd_run(args):
    cfg = _load(args)
    problem = cfgmod.build_problem(cfg)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, out / "config.cfg")
    traces = JsonlWriter(out / "traces.jsonl")
    summary = {"version": __version__, "preset": cfg.name, "seed": cfg.run.seed,
               "nsteps_requested": cfg.loop.nsteps, "dt": cfg.loop.dt}
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        if problem.couplings.radiation:
            hyp = _hypothesis_report(problem)
            traces({"event": "hypotheses", **hyp.as_dict()})
            summary["hypotheses"] = hyp.as_dict()
            if not hyp.ok:
                _print_hypotheses(hyp, sys.stderr)
                raise rad.HypothesisError(*next((c["name"], c["lhs"], c["rhs"])
                                                for c in hyp.as_dict()["checks"] if not c["ok"]))
        res = cp.adapt_horizon(problem, cfg.loop.nsteps, cfg.loop.kappa_target, cfg.loop.inner_target,
                               log=traces)
        traces({"event": "horizon", "accepted_nsteps": res.nsteps, "horizon": res.horizon,
                "history": res.history})
        traces({"event": "outer_trace", **res.outer.as_dict()})
        for k, t in enumerate(res.inner, 1):
            traces({"event": "inner_trace", "outer_pass": k, **t.as_dict()})
        for r in res.diagnostics["radiation"]:
            traces({"event": "radiation", **r})
        cons = conservation_residuals(problem, res.trajectory)
        diag = JsonlWriter(out / "diagnostics.jsonl")
        norms = cp.norm_estimators(problem.domain, res.trajectory, problem.mass, problem.p, problem.q).as_dict()
        for rec, ap in zip(cons, res.diagnostics["apriori"]["steps"]):
            diag({"event": "step", **rec, **ap})
        diag({"event": "norms", **norms})
        diag.close()
        if cfg.output.write_fields:
            write_fields(out, problem, res.trajectory, cfg.output.cadence)
        summary.update({
            "status": "ok", "nsteps": res.nsteps, "horizon": res.horizon,
            "outer_factor": res.outer.factor, "inner_factor": cp.inner_factor(res.inner),
            "outer_passes": len(res.outer.distances), "outer_converged_in": res.outer.converged_in,
            "apriori_ok": res.diagnostics["apriori"]["ok"],
            "max_dry_air_rel_change": max((c.get("dry_air_rel_change", 0.0) for c in cons), default=0.0),
            "max_water_rel_change": max((c.get("water_rel_change", 0.0) for c in cons), default=0.0),
            "boundary_velocity_max": cp.boundary_velocity_max(problem.domain, res.trajectory),
            "final": {"T_min": float(res.trajectory.T[-1].min()), "T_max": float(res.trajectory.T[-1].max()),
                      "v_max": float(np.abs(res.trajectory.v[-1]).max())},
       
        })
        summary["invariants"] = invariant_status(summary, res)
        if not all(summary["invariants"].values()):
            code, summary["status"] = EXIT_SOLVE, "invariant check failed: " + ", ".join(
                k for k, ok in summary["invariants"].items() if not ok)
        print(f"{cfg.name}: accepted horizon {res.horizon:.6g} ({res.nsteps} steps), "
              f"outer factor {res.outer.factor:.4g}, inner factor {cp.inner_factor(res.inner):.4g}")
    except rad.HypothesisError as exc:
        code, summary["status"] = EXIT_HYPOTHESIS, f"hypothesis failed: {exc}"
    except cp.NoAdmissibleHorizon as exc:
        traces({"event": "horizon", "accepted_nsteps": None, "history": exc.history})
        code, summary["status"] = EXIT_HORIZON, f"no admissible horizon: {exc}"
    except SOLVE_ERRORS as exc:
        code, summary["status"] = EXIT_SOLVE, f"solve failed: {type(exc).__name__}: {exc}"
    finally:
        traces.close()
    summary["exit_code"] = code
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    if code:
        print(summary["status"], file=sys.stderr)
    print(f"outputs in {out} ({time.perf_counter() - t0:.1f} s)")
    return code


def _read_jsonl(path):
    if not path.is_file():
        return []
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        try:
            out.append(json.loads(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: corrupt record ({exc})") from exc
    return out


def cmd_report(args):
    out = Path(args.run_dir)
    try:
        summary = json.loads((out / "summary.json").read_text())
        traces = _read_jsonl(out / "traces.jsonl")
        steps = [r for r in _read_jsonl(out / "diagnostics.jsonl") if r.get("event") == "step"]
    except (OSError, ValueError) as exc:
        print(f"cannot read run directory {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"run {out}: preset {summary.get('preset')}, status {summary.get('status')}, "
          f"exit code {summary.get('exit_code')}")
    hyp = summary.get("hypotheses")
    if hyp:
        print("radiation hypotheses:")
        for c in hyp["checks"]:
            print(f"  [{'ok  ' if c['ok'] else 'FAIL'}] {c['name']}: {c['lhs']:.6g} vs {c['rhs']:.6g}")
    horizon = next((r for r in traces if r.get("event") == "horizon"), None)
    if horizon:
        print("horizon search:")
        for h in horizon["history"]:
            extra = h.get("reason") or (f"inner {h['inner_factor']:.4g}, outer {h['outer_factor']:.4g}")
            print(f"  {h['nsteps']:4d} steps (t = {h['horizon']:.4g}): "
                  f"{'accepted' if h['accepted'] else 'rejected'}; {extra}")
    outer = next((r for r in traces if r.get("event") == "outer_trace"), None)
    if outer:
        print("outer passes (distance, ratio):")
        ratios = [None] + list(outer["ratios"])
        for k, d in enumerate(outer["distances"], 1):
            r = ratios[k - 1] if k - 1 < len(ratios) else None
            print(f"  {k:3d}  {d:.4e}  {'' if r is None else f'{r:.4f}'}")
        inner = [r for r in traces if r.get("event") == "inner_trace"]
        if inner:
            print("inner factor per outer pass: " + ", ".join(f"{r['factor']:.4g}" for r in inner))
    if steps:
        print("per step: t, dry-air change, water change, rho range, pi max, T min")
        dt = summary.get("dt", 0.0)
        for r in steps:
            print(f"  {r['step'] * dt:8.4f}  {r.get('dry_air_rel_change', 0.0):.2e}  "
                  f"{r.get('water_rel_change', 0.0):.2e}  [{r['rho_min']:.5g}, {r['rho_max']:.5g}]  "
                  f"{r['pi_max']:.5g}  {r['T_min']:.5g}")
    inv = summary.get("invariants")
    if inv:
        print("invariants: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in inv.items()))
    if args.csv and steps:
        keys = sorted({k for r in steps for k in r if k != "event"})
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + keys)
            for r in steps:
                w.writerow([r["step"] * summary.get("dt", 0.0)] + [r.get(k, "") for k in keys])
        print(f"wrote {args.csv}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="cloudrad", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"cloudrad {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("validate", "run"):
        p = sub.add_parser(verb)
        p.add_argument("config", help="config file or preset name")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if verb == "run":
            p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ROOT_ENV}/<preset>)")
    p = sub.add_parser("report")
    p.add_argument("run_dir")
    p.add_argument("--csv", default=None, help="write per-step diagnostics as plot-ready CSV")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return {"validate": cmd_validate, "run": cmd_run, "report": cmd_report}[args.verb](args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
