"""Run a preset through the CLI and optionally archive its trace stream as the golden file.

    python scripts/run_desk.py                  # full_desk into runs/full_desk
    python scripts/run_desk.py --golden         # also refresh tests/golden/full_desk_traces.jsonl
    python scripts/run_desk.py coagulation_box --out /tmp/cb
"""
import argparse
import shutil
import sys
from pathlib import Path

from cloudrad.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("preset", nargs="?", default="full_desk")
    ap.add_argument("--out", default=None)
    ap.add_argument("--golden", action="store_true", help="copy traces.jsonl into tests/golden")
    args = ap.parse_args()
    out = Path(args.out) if args.out else ROOT / "runs" / args.preset
    # golden traces are recorded single-threaded; the acceptance test compares bitwise at 1 thread
    code = main(["run", args.preset, "--out", str(out), "--threads", "1"])
    if code == 0:
        main(["report", str(out)])
        if args.golden:
            dest = ROOT / "tests" / "golden" / f"{args.preset}_traces.jsonl"
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(out / "traces.jsonl", dest)
            print(f"golden trace written to {dest}")
    return code


if __name__ == "__main__":
    sys.exit(run())
