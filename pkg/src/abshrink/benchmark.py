"""
Method registry and replicated benchmark runs on simulated scenarios.

Every method is fitted on a training part (full readouts plus, for the
splitting regressions, split pairs) and then adjusts arrays of test
readouts, returning means, variances and interval endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cmle import cmle_adjust
from .core import SelectionRule, ValidationError, z_quantile
from .evalreport import DEFAULT_BUCKETS, EvalReport, EvalRow, Estimates, score_against_truth
from .fitting import fit_mle2
from .localh1 import PriorOdds, localh1_moments
from .posteriors import PriorModel, posterior_moments
from .simlab import RMSE_UNIT, Scenario, SimulatedData, generate_arrays
from .splitreg import DEFAULT_SPEC, PLUS_SPEC, train_rwes_linear, train_tarwes

METHODS = ("unadjusted", "theoretical", "cmle", "eb-normal", "eb-laplace", "eb-huber", "ghidorah",
           "rwes-linear", "tarwes", "tarwes-plus", "localh1")
EB_FAMILIES = {"eb-normal": "gaussian", "eb-laplace": "laplace", "eb-huber": "huber", "ghidorah": "mixture"}
NO_VAR_S = ("unadjusted", "rwes-linear", "tarwes", "tarwes-plus")


@dataclass
class FittedMethod:
    """A method ready to adjust readouts.

    ``adjust(delta, se2, rule)`` returns ``(mean, var, ci_low, ci_high)``;
    ``rule`` only matters for CMLE, which needs the selection threshold.
    """

    name: str
    adjust: Callable
    model: object = None
    notes: list = field(default_factory=list)


def _normal_ci(mean, var, alpha):
    half = z_quantile(alpha) * np.sqrt(var)
    return mean, var, mean - half, mean + half


def _prior_method(name, prior, alpha, notes=()):
    def adjust(delta, se2, rule=None):
        mean, var, _ = posterior_moments(prior, delta, se2)
        return _normal_ci(mean, np.minimum(var, se2), alpha)
    return FittedMethod(name, adjust, prior, list(notes))


def fit_method(name: str, train_delta=None, train_se2=None, pairs=None, *, prior: PriorModel | None = None,
               odds: PriorOdds = PriorOdds(), alpha=0.05, eb_priors: dict | None = None) -> FittedMethod:
    """Fit ``name`` on the training data.

    Parameters
    ----------
    train_delta, train_se2 : arrays
        Full-traffic training readouts (used by every EB fit).
    pairs : list of SplitPair
        Needed by ``rwes-linear``, ``tarwes`` and ``tarwes-plus``.
    prior : PriorModel
        The true prior, for ``theoretical``.
    eb_priors : dict, optional
        Already fitted priors keyed ``gaussian`` / ``laplace`` / ``ghidorah``,
        reused by the regression methods instead of refitting.
    """
    if name not in METHODS:
        raise ValidationError(f"unknown method {name!r}; expected one of {METHODS}")
    if name == "unadjusted":
        return FittedMethod(name, lambda d, s, rule=None: _normal_ci(np.asarray(d, float), np.asarray(s, float), alpha))
    if name == "theoretical":
        if prior is None:
            raise ValidationError("theoretical needs the true prior")
        return _prior_method(name, prior, alpha)
    if name == "localh1":
        def adjust(d, s, rule=None):
            mean, var = localh1_moments(d, s, odds)
            return _normal_ci(mean, np.minimum(var, s), alpha)
        return FittedMethod(name, adjust, odds)
    if name == "cmle":
        def adjust(d, s, rule=None):
            if rule is None:
                raise ValidationError("cmle needs a selection threshold")
            mean, var, lo, hi, _ = cmle_adjust(d, s, rule, alpha)
            return mean, var, lo, hi
        return FittedMethod(name, adjust)
    if name in EB_FAMILIES:
        fit = fit_mle2((train_delta, train_se2), EB_FAMILIES[name])
        return _prior_method(name, fit.prior, alpha, fit.notes)
    # splitting regressions
    if pairs is None:
        raise ValidationError(f"{name} needs split pairs for training")
    if name == "rwes-linear":
        model = train_rwes_linear(pairs)
    else:
        spec = DEFAULT_SPEC if name == "tarwes" else PLUS_SPEC
        priors = dict(eb_priors or {})
        wanted = {"gaussian": "gaussian", "laplace": "laplace", "ghidorah": "mixture"}
        for f in spec:
            if f.prior and f.prior not in priors:
                priors[f.prior] = fit_mle2((train_delta, train_se2), wanted[f.prior]).prior
        model = train_tarwes(pairs, spec, {k: priors[k] for k in {f.prior for f in spec if f.prior}})

    def adjust(d, s, rule=None):
        d = np.asarray(d, float)
        s = np.asarray(s, float)
        return _normal_ci(model.predict_mean(d, s), model.predict_variance(d, s), alpha)
    return FittedMethod(name, adjust, model)


@dataclass
class BenchmarkResult:
    scenario: Scenario
    methods: tuple
    reports: list  # one EvalReport per replication, RMSE in raw units
    selection_rates: list  # per replication: {bucket label: fraction}

    def mean_report(self, unit=RMSE_UNIT) -> EvalReport:
        """Average of each (method, bucket) cell over replications, RMSE divided by ``unit``."""
        cells = {}
        for rep in self.reports:
            for r in rep.rows:
                cells.setdefault((r.method, r.bucket), []).append(r)
        rows = []
        for (m, b), rs in cells.items():
            vs = None if rs[0].var_s is None else float(np.nanmean([r.var_s for r in rs]))
            rows.append(EvalRow(m, b, int(round(np.mean([r.count for r in rs]))),
                                float(np.nanmean([r.rmse for r in rs])) / unit,
                                float(np.nanmean([r.coverage for r in rs])), vs))
        return EvalReport(rows)

    def per_replication(self, method, bucket, attr="rmse"):
        return np.array([getattr(rep.row(method, bucket), attr) for rep in self.reports])


def replicate(scenario: Scenario, methods: Sequence[str] = ("unadjusted", "eb-normal", "ghidorah"),
              replications=20, buckets=DEFAULT_BUCKETS, alpha=0.05, odds=PriorOdds(),
              cmle_all_rule=SelectionRule.p_below(0.05)) -> BenchmarkResult:
    """Run ``methods`` on ``replications`` seeds ``scenario.seed, scenario.seed + 1, ...``.

    CMLE is scored bucket by bucket with that bucket's threshold; for the
    unselected bucket it uses ``cmle_all_rule``.
    """
    methods = tuple(methods)
    reports, rates = [], []
    for r in range(replications):
        sc = scenario.with_(seed=scenario.seed + r)
        train, test = generate_arrays(sc, "train"), generate_arrays(sc, "test")
        report = run_once(sc, train, test, methods, buckets, alpha, odds, cmle_all_rule)
        reports.append(report)
        rates.append({b.label: float(np.mean(b.mask(test.delta, test.se2))) for b in buckets})
    return BenchmarkResult(scenario, methods, reports, rates)


def run_once(scenario: Scenario, train: SimulatedData, test: SimulatedData, methods, buckets=DEFAULT_BUCKETS,
             alpha=0.05, odds=PriorOdds(), cmle_all_rule=SelectionRule.p_below(0.05)) -> EvalReport:
    """Fit and score every method on one generated train/test draw."""
    truths = dict(zip(test.ids, test.mu))
    needs_pairs = {"rwes-linear", "tarwes", "tarwes-plus"} & set(methods)
    pairs = train.pairs() if needs_pairs else None
    fitted_priors = {}
    report = EvalReport()
    for name in methods:
        fm = fit_method(name, train.delta, train.se2, pairs, prior=scenario.prior, odds=odds, alpha=alpha,
                        eb_priors=fitted_priors)
        if name in ("eb-normal", "eb-laplace", "ghidorah"):
            fitted_priors[{"eb-normal": "gaussian", "eb-laplace": "laplace", "ghidorah": "ghidorah"}[name]] = fm.model
        var_s = name not in NO_VAR_S
        if name == "cmle":
            for b in buckets:
                rule = b if b.value is not None and b.value < 1 else cmle_all_rule
                est = Estimates(test.ids, test.delta, test.se2, *fm.adjust(test.delta, test.se2, rule))
                report.extend(score_against_truth(est, truths, (b,), method=name))
            continue
        est = Estimates(test.ids, test.delta, test.se2, *fm.adjust(test.delta, test.se2))
        report.extend(score_against_truth(est, truths, buckets, method=name, var_s=var_s))
    return report
