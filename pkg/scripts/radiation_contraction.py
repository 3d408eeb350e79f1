"""Measured Picard contraction against the admissibility margin as scattering grows.

For each dry-air scattering coefficient the script checks the admissibility
inequalities, solves the gray transfer problem and prints the largest sweep
ratio next to 1 - eps_b.  Inadmissible settings are still solved and marked.

    python scripts/radiation_contraction.py --shape ball --resolution 8
"""
import argparse

import numpy as np

from cloudrad.domain import DomainConfig, MassGrid, WavelengthBands, angular_quadrature, build_domain
from cloudrad.radiation import (BoundaryIntensity, Medium, OpticalCoefficients, PlanckConstants,
                                RadiationModel, solve_radiation, validate_hypotheses)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", choices=["box", "ball"], default="box")
    ap.add_argument("--resolution", type=int, default=8)
    ap.add_argument("--order", type=int, default=2, help="angular quadrature order")
    ap.add_argument("--absorption", type=float, default=0.05)
    ap.add_argument("--scattering", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    d = build_domain(DomainConfig(args.shape, args.resolution))
    quad = angular_quadrature(args.order)
    mass = MassGrid.geometric(24, 1.0, 2.0, 8.0, 64.0, 16.0)
    rng = np.random.default_rng(args.seed)
    n = d.n_cells
    med = Medium(rng.uniform(0.5, 1.5, n), rng.uniform(0, 0.02, n), np.zeros((mass.n_bins, n)))
    T = rng.uniform(0.8, 1.2, n)
    print(f"{args.shape} {args.resolution}^3, {len(quad)} directions, a1 = {args.absorption}")
    print("      r1  admissible   1-eps_b   max ratio  sweeps")
    for r1 in args.scattering:
        co = OpticalCoefficients.uniform(1, mass.n_bins, a1=args.absorption, r1=r1)
        rep = validate_hypotheses(med, co, d, quad, mass, raise_on_failure=False)
        model = RadiationModel(d, quad, WavelengthBands(np.array([0.0, np.inf])), mass, co,
                               BoundaryIntensity.constant([0.5]), PlanckConstants.nondimensional())
        _, diag = solve_radiation(model.build(med, T), tol=1e-10, hypotheses=rep if rep.passed else None)
        ratio = max(diag.ratios) if diag.ratios else 0.0
        margin = f"{1 - diag.eps_b:9.4f}" if diag.eps_b is not None else "        -"
        print(f"  {r1:6.3f}  {str(rep.passed):>10}  {margin}  {ratio:10.4f}  {diag.sweeps:6d}")


if __name__ == "__main__":
    main()
