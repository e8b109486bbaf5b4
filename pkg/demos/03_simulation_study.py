"""A small simulation study: bias, spread and coverage across model regimes.

Run: python3 demos/03_simulation_study.py [replicates]
The acceptance tests run the same scenarios with 500 replicates at n = 2000.
"""

import os
import sys

from balcause import Scenario, run_replicates

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 40
workers = os.cpu_count() or 1

# %% four-level design, every combination of correct / misspecified working models
print(f"cat41, n=1000, {reps} replicates, contrast theta1 - theta0 (truth 82.2)")
print("pi model      m basis       method      bias      sd  sd_hat  coverage")
for pi_ok in (True, False):
    for m_ok in (True, False):
        sc = Scenario("cat41", 1000, reps, pi_ok, m_ok, seed=5, methods=("balancing", "mle"))
        table = run_replicates(sc, workers=workers)
        for method in sc.methods:
            r = table.row(method=method, contrast="theta1-theta0")
            print(f"{'correct' if pi_ok else 'misspecified':<13} "
                  f"{'correct' if m_ok else 'misspecified':<13} {method:<9} "
                  f"{r['bias']:7.3f} {r['sd']:7.3f} {r['sd_hat']:7.3f} {r['coverage']:9.3f}")

# %% continuous design: integrated bias and RMSE (x100) of the curve
print(f"\ncont_linear, n=500, {reps} replicates, local constant + LOO-CV")
sc = Scenario("cont_linear", 500, reps, seed=5, methods=("balancing", "mle"))
for r in run_replicates(sc, workers=workers).rows:
    print(f"{r['method']:<10} bias x100 {r['bias_x100']:5.2f}   rmse x100 {r['rmse_x100']:5.2f}")
