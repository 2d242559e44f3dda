"""
Benchmark tables for the three built-in scenarios
==================================================

Runs every method on seeded replications of each case and prints the
averaged RMSE (in units of 0.1), interval coverage and Var_S by bucket.

    python3 notebooks/benchmark_tables.py --reps 20
"""

# %%
import argparse
import time

import numpy as np

from abshrink.benchmark import METHODS, replicate
from abshrink.simlab import builtin_case

parser = argparse.ArgumentParser()
parser.add_argument("--reps", type=int, default=5)
parser.add_argument("--cases", default="1,2,3")
args = parser.parse_args()

# %% [markdown]
# ``theoretical`` uses the true simulation prior, so it is the floor the
# fitted methods aim for.

# %%
for case in (int(c) for c in args.cases.split(",")):
    t0 = time.time()
    res = replicate(builtin_case(case, seed=1000 * case), METHODS, replications=args.reps)
    rates = {k: np.mean([r[k] for r in res.selection_rates]) for k in res.selection_rates[0]}
    print(f"\nCase {case}: {args.reps} replications in {time.time() - t0:.0f}s, "
          f"selected p<0.05 {100 * rates['p<0.05']:.1f}%, p<0.01 {100 * rates['p<0.01']:.1f}%")
    print(res.mean_report().to_text())
