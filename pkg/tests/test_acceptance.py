"""
Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS`` / ``FAIL`` line straight to the terminal (so it
shows up under ``pytest -v`` without ``-s``) and then asserts.  The file also
runs as a script: ``python3 tests/test_acceptance.py``.
"""

import math
import subprocess
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from abshrink.benchmark import replicate
from abshrink.cmle import cmle_ci_many, cmle_solve
from abshrink.core import two_sided_p
from abshrink.evalreport import DEFAULT_BUCKETS, Estimates, score_against_split_b, score_against_truth
from abshrink.fitting import sure_objective
from abshrink.posteriors import (
    Gaussian,
    Laplace,
    Mixture,
    marginal_loglik,
    posterior_gaussian,
    posterior_laplace,
    posterior_mixture,
    posterior_moments,
    quadrature_for,
)
from abshrink.simlab import builtin_case, generate_arrays

HERE = Path(__file__).resolve().parent
REPS = 20
_CAPTURE = None


def report(name, checks):
    """Print ``PASS``/``FAIL`` with the measured values, then assert every check."""
    ok = all(c[0] for c in checks)
    detail = "; ".join(f"{'ok' if c[0] else 'MISS'} {c[1]}" for c in checks)
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    if _CAPTURE is not None:
        with _CAPTURE.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print(line, flush=True)
    assert ok, line


@pytest.fixture(autouse=True)
def _terminal(request):
    global _CAPTURE
    _CAPTURE = request.config.pluginmanager.getplugin("capturemanager")
    yield
    _CAPTURE = None


def within(value, target, tol, label, fmt="{:.3f}"):
    return abs(value - target) <= tol, f"{label} {fmt.format(value)} (target {fmt.format(target)} +- {fmt.format(tol)})"


# ---------------------------------------------------------------------------
# 1-2: closed forms against quadrature, Tweedie identity
# ---------------------------------------------------------------------------

SETTINGS = {
    "gaussian": [Gaussian(t) for t in (0.05, 0.3, 1.0, 2.5, 10.0)],
    "laplace": [Laplace(v) for v in (0.05, 0.3, 1.0, 2.5, 10.0)],
    "mixture": [Mixture(0.7, 0.15, 0.15, 0.5, 2.0), Mixture(0.5, 0.0, 0.5, 1.0, 1.0), Mixture(0.2, 0.6, 0.2, 0.1, 4.0),
                Mixture(0.9, 0.05, 0.05, 3.0, 0.2), Mixture(1 / 3, 1 / 3, 1 / 3, 1.0, 1.0)],
}
SE2 = (0.5, 1.0, 2.0, 0.5, 1.0)


def _closed(family, prior, d, se2):
    if family == "gaussian":
        return posterior_gaussian(d, se2, prior.tau2)
    if family == "laplace":
        return posterior_laplace(d, se2, prior.nu2)
    s = posterior_mixture(d, se2, prior)
    return s.mean, s.variance_uncapped


def test_1_oracle_equivalence():
    worst_m, worst_v = 0.0, 0.0
    for family, priors in SETTINGS.items():
        for prior, se2 in zip(priors, SE2):
            for d in np.linspace(-8, 8, 41) * math.sqrt(se2):
                m, v = _closed(family, prior, float(d), se2)
                q = quadrature_for(prior, float(d), se2)
                worst_m = max(worst_m, abs(m - q.mean) / math.sqrt(se2))
                worst_v = max(worst_v, abs(v - q.var) / q.var)
    report("1 oracle equivalence", [(worst_m <= 1e-5, f"max mean err {worst_m:.2e} sd (<= 1e-5)"),
                                    (worst_v <= 1e-5, f"max var rel err {worst_v:.2e} (<= 1e-5)")])


def test_2_tweedie():
    worst = 0.0
    for family, priors in SETTINGS.items():
        for prior, se2 in zip(priors, SE2):
            h = 1e-4 * math.sqrt(se2)
            for d in np.linspace(-8, 8, 41) * math.sqrt(se2):
                lp, l0, lm = (marginal_loglik(prior, d + s * h, se2) for s in (1, 0, -1))
                m, v, _ = posterior_moments(prior, d, se2)
                m_fd = d + se2 * (lp - lm) / (2 * h)
                v_fd = se2 * (1 + se2 * (lp - 2 * l0 + lm) / (h * h))
                # relative error, with the noise scale as floor where the mean crosses zero
                worst = max(worst, abs(m - m_fd) / max(abs(m), math.sqrt(se2)), abs(v - v_fd) / v)
    report("2 Tweedie consistency", [(worst <= 1e-4, f"max rel err {worst:.2e} (<= 1e-4)")])


# ---------------------------------------------------------------------------
# 3: CMLE
# ---------------------------------------------------------------------------

def test_3_cmle_exactness():
    mu, s, K = 0.5, 1.0, 1.65
    rng = np.random.default_rng(20240601)
    draws = []
    while sum(map(len, draws)) < 10_000:
        x = rng.normal(mu, s, 40_000)
        draws.append(x[np.abs(x) >= K])
    x = np.concatenate(draws)[:10_000]
    lo, hi = cmle_ci_many(x, s, K, 0.05)
    cov = float(np.mean((lo <= mu) & (mu <= hi)))
    grid = np.arange(-6, 6 + 1e-12, 1e-4)
    from scipy import stats
    ll = stats.norm.logpdf(2.0, grid, s) - np.log(stats.norm.cdf(-K, grid, s) + stats.norm.sf(K, grid, s))
    gap = abs(cmle_solve(2.0, s, K).mu_hat - grid[np.argmax(ll)])
    report("3 CMLE exactness", [within(cov, 0.95, 0.01, "coverage", "{:.4f}"),
                                (gap <= 2e-4, f"argmax gap {gap:.1e} (<= 2e-4)")])


# ---------------------------------------------------------------------------
# 4-6: benchmark reproduction
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def bench(case, methods):
    return replicate(builtin_case(case, seed=1000 * case), methods, replications=REPS)


def test_4_case1():
    res = bench(1, ("unadjusted", "eb-normal", "ghidorah"))
    rep = res.mean_report()
    r05 = np.mean([r["p<0.05"] for r in res.selection_rates])
    r01 = np.mean([r["p<0.01"] for r in res.selection_rates])
    un, eb, gh = rep.row("unadjusted", "All"), rep.row("eb-normal", "All"), rep.row("ghidorah", "p<0.01")
    report("4 Case 1 reproduction", [
        within(100 * r05, 15.2, 1.5, "rate p<0.05 %", "{:.2f}"),
        within(100 * r01, 6.5, 1.0, "rate p<0.01 %", "{:.2f}"),
        within(un.rmse, 1.46, 0.08, "unadjusted All RMSE"),
        within(100 * un.coverage, 95.0, 1.5, "unadjusted All cov %", "{:.1f}"),
        within(eb.rmse, 0.77, 0.06, "eb-normal All RMSE"),
        within(100 * eb.coverage, 94.7, 2.0, "eb-normal All cov %", "{:.1f}"),
        within(eb.var_s, 0.42, 0.05, "eb-normal Var_S"),
        within(gh.rmse, 0.71, 0.08, "ghidorah p<0.01 RMSE"),
    ])


def test_5_case2():
    res = bench(2, ("eb-normal", "eb-laplace", "ghidorah"))
    rep = res.mean_report()
    g_all, g01 = rep.row("ghidorah", "All"), rep.row("ghidorah", "p<0.01")
    g, l, n = (res.per_replication(m, "p<0.01") for m in ("ghidorah", "eb-laplace", "eb-normal"))
    order = int(np.sum((g <= l) & (l <= n)))
    report("5 Case 2 reproduction", [
        within(g_all.rmse, 0.80, 0.08, "ghidorah All RMSE"),
        within(g01.rmse, 1.26, 0.15, "ghidorah p<0.01 RMSE"),
        within(100 * g01.coverage, 93.1, 3.0, "ghidorah p<0.01 cov %", "{:.1f}"),
        (order >= 16, f"ordering ghidorah<=laplace<=normal in {order}/{REPS} (>= 16)"),
    ])


def test_6_case3():
    res = bench(3, ("unadjusted", "eb-normal", "ghidorah"))
    rep = res.mean_report()
    n01, u01 = res.per_replication("eb-normal", "p<0.01"), res.per_replication("unadjusted", "p<0.01")
    worse = int(np.sum(n01 > u01))
    report("6 Case 3 reproduction", [
        within(rep.row("ghidorah", "All").rmse, 0.64, 0.08, "ghidorah All RMSE"),
        (worse >= 16, f"normal p<0.01 RMSE > unadjusted in {worse}/{REPS} (>= 16); "
                      f"means {rep.row('eb-normal', 'p<0.01').rmse:.2f} vs {rep.row('unadjusted', 'p<0.01').rmse:.2f}"),
    ])


# ---------------------------------------------------------------------------
# 7: split identities
# ---------------------------------------------------------------------------

def test_7_split_identity():
    sc = builtin_case(1, n_train=10_000, seed=77)
    d = generate_arrays(sc, "train")
    sa = d.se2_half
    mean, var, _ = posterior_moments(sc.prior, d.delta_a, sa)
    est = Estimates.from_moments(d.ids, d.delta_a, sa, mean, var)
    truth = score_against_truth(est, dict(zip(d.ids, d.mu)), DEFAULT_BUCKETS, "m")
    split = score_against_split_b(est, d.pairs(), DEFAULT_BUCKETS, "m")
    checks = []
    for b in DEFAULT_BUCKETS:
        t, s = truth.row("m", b.label), split.row("m", b.label)
        sel = b.mask(d.delta_a, sa)
        # standard error of the RMSE difference, by the delta method on the paired MSE difference
        diff = (mean[sel] - d.delta_b[sel]) ** 2 - d.se2_half[sel] - (mean[sel] - d.mu[sel]) ** 2
        se = diff.std(ddof=1) / math.sqrt(sel.sum()) / (2 * t.rmse)
        checks.append((abs(s.rmse - t.rmse) <= 3 * se,
                       f"{b.label} RMSE {s.rmse / 0.1:.3f} vs {t.rmse / 0.1:.3f} (3 se = {3 * se / 0.1:.3f})"))
        checks.append(within(100 * s.coverage, 100 * t.coverage, 2.0, f"{b.label} cov %", "{:.1f}"))
    report("7 split identities", checks)


# ---------------------------------------------------------------------------
# 8: SURE
# ---------------------------------------------------------------------------

def test_8_sure_unbiased():
    tau2, n = 1e-3, 1000
    sc = builtin_case(1)
    rng = np.random.default_rng(8)
    sizes = np.array([s for s, _ in sc.size_pool], dtype=float)
    sure, risk = [], []
    for _ in range(200):
        se2 = sc.sigma2 / rng.choice(sizes, n)
        mu = rng.normal(0, math.sqrt(tau2), n)
        delta = mu + rng.normal(0, np.sqrt(se2))
        sure.append(sure_objective(tau2, delta, se2))
        risk.append(np.sum((tau2 / (tau2 + se2) * delta - mu) ** 2))
    diff = np.array(sure) - np.array(risk)
    se = diff.std(ddof=1) / math.sqrt(diff.size)
    report("8 SURE unbiasedness", [(abs(diff.mean()) <= 3 * se,
                                    f"mean SURE {np.mean(sure):.5g} vs risk {np.mean(risk):.5g} "
                                    f"(gap {diff.mean():.2e}, 3 se = {3 * se:.2e})")])


# ---------------------------------------------------------------------------
# 9: property suites
# ---------------------------------------------------------------------------

PROPERTY_SUITES = [
    "test_posteriors.py::TestProperties",
    "test_posteriors.py::TestSummaries::test_cap",
    "test_cmle.py::TestSolve::test_residual_and_shrinkage",
    "test_cmle.py::TestSolve::test_equivariance_and_oddness",
    "test_localh1.py::TestEstimate::test_bounds",
    "test_splitreg.py::TestNnls",
    "test_fitting.py::TestGhidorah::test_trace_monotone",
    "test_fitting.py::TestGhidorah::test_trace_monotone_any_input",
    "test_cli.py::TestSimulate::test_deterministic",
]


def test_9_property_suites():
    args = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider"] + [str(HERE / s) for s in PROPERTY_SUITES]
    r = subprocess.run(args, capture_output=True, text=True, cwd=HERE.parent)
    tail = (r.stdout.strip().splitlines() or ["no output"])[-1]
    report("9 property suites", [(r.returncode == 0, tail)])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
