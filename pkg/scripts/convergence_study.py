"""Observed orders of the velocity and temperature solvers on manufactured solutions.

    python scripts/convergence_study.py
    python scripts/convergence_study.py --space 8 16 32 64 --time 10 20 40 80 160
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import mms  # noqa: E402


def table(label, keys, errs):
    orders = [float("nan")] + mms.orders(errs)
    print(label)
    for k, e, o in zip(keys, errs, orders):
        print(f"  {k:>6}  {e:.4e}  {o:6.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--space", type=int, nargs="+", default=[8, 16, 32])
    ap.add_argument("--time", type=int, nargs="+", default=[10, 20, 40, 80])
    args = ap.parse_args()
    table("velocity, cells per axis / error / order", args.space, mms.velocity_space_errors(args.space))
    table("temperature, cells per axis / error / order", args.space, mms.temperature_space_errors(args.space))
    tT, tv = mms.time_errors(args.time)
    table("velocity, steps / error / order", args.time, tv)
    table("temperature, steps / error / order", args.time, tT)


if __name__ == "__main__":
    main()
