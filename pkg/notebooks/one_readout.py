"""
One significant readout, every adjustment
=========================================

A single Case-1 style readout just past p < 0.01, adjusted by the
training-free methods and by EB priors fitted on simulated history.
"""

# %%
import numpy as np

from abshrink.cmle import cmle_estimate
from abshrink.core import SelectionRule, two_sided_p, z_quantile
from abshrink.fitting import fit_mle2
from abshrink.localh1 import PriorOdds, localh1_moments
from abshrink.posteriors import posterior
from abshrink.simlab import builtin_case, generate_arrays

hist = generate_arrays(builtin_case(1, n_train=2000, seed=3), "train")
se2 = float(np.median(hist.se2))
delta = 2.7 * np.sqrt(se2)
print(f"readout: delta={delta:.4f} se={np.sqrt(se2):.4f} p={two_sided_p(delta, np.sqrt(se2)):.4f}")

# %% [markdown]
# Training-free: the conditional MLE knows only the selection threshold;
# the local-H1 bound knows only the p-value and prior odds.

# %%
r = cmle_estimate(delta, np.sqrt(se2), z_quantile(0.01) * np.sqrt(se2))
print(f"cmle      mean={r.mu_hat:.4f}  ci=({r.ci_low:.4f}, {r.ci_high:.4f})")
for odds in ("1:1", "1:7"):
    m, v = localh1_moments(delta, se2, PriorOdds.parse(odds))
    print(f"localh1 {odds}  mean={float(m):.4f}  uncapped var/se2={float(v) / se2:.2f}")

# %% [markdown]
# Empirical Bayes: fit each family on the history, then read off the posterior.

# %%
for family in ("gaussian", "laplace", "mixture"):
    fit = fit_mle2((hist.delta, hist.se2), family)
    s = posterior(fit.prior, delta, se2)
    print(f"{family:<9} mean={s.mean:.4f}  ci=({s.ci_low:.4f}, {s.ci_high:.4f})  Var_S={s.variance / se2:.2f}")
