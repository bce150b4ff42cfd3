"""Monte Carlo variance of the effect estimate: default versus optimal instruments.

    python scripts/efficiency.py [--reps N] [--tau T] [--n N]
"""

import argparse

import numpy as np

from merobust.gmm import estimate_effect
from merobust.optimal import optimal_system
from merobust.simlab import SimConfig, analytic_conditional_moments, build_system, generate

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--tau", type=float, default=0.7)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--psi0", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    cfg = SimConfig(n=args.n, tau=args.tau, psi0=args.psi0, seed=args.seed, n_reps=args.reps)
    default, best = [], []
    for rep in range(args.reps):
        data = generate(cfg, rep)
        system = build_system("rps", data)
        cm = analytic_conditional_moments(data.c[:, 0], args.tau)
        default.append(estimate_effect(system, data).psi_hat)
        best.append(estimate_effect(optimal_system(cm, system.exposure_basis), data).psi_hat)
    v0, v1 = np.var(default, ddof=1), np.var(best, ddof=1)
    print(f"default instruments: mean {np.mean(default):.4f}  var {v0:.3e}")
    print(f"optimal instruments: mean {np.mean(best):.4f}  var {v1:.3e}")
    print(f"variance ratio optimal/default: {v1 / v0:.3f}")
