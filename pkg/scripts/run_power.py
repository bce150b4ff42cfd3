"""Power curves of the robust propensity-score test.

    python scripts/run_power.py [--reps N] [--threads K] [--out-dir DIR]
"""

import argparse
import sys
from pathlib import Path

from merobust.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out-dir", default="results/power")
    args = ap.parse_args()
    argv = ["power", "--config", str(ROOT / "configs" / "power-desk.cfg"),
            "--threads", str(args.threads), "--out-dir", args.out_dir]
    if args.reps:
        argv += ["--reps", str(args.reps)]
    sys.exit(main(argv))
