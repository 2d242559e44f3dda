"""
Command-line interface.

    abshrink simulate --case 1 --train 1000 --test 1000 --seed 7 --out-dir sim/
    abshrink fit --method ghidorah --readouts sim/train_readouts.csv --out prior.txt
    abshrink adjust --method ghidorah --prior prior.txt --readouts sim/test_readouts.csv --out adj.csv
    abshrink evaluate --adjusted adj.csv --readouts sim/test_readouts.csv --truth sim/truth.csv

Exit status: 0 success, 1 invalid input, 2 numerical failure.  Every flag
can also come from ``--config FILE`` (flat ``key=value`` lines, keys are flag
names); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import EB_FAMILIES, METHODS, fit_method
from .cmle import cmle_adjust
from .core import (
    ConfigurationError,
    NumericalError,
    SelectionRule,
    ValidationError,
    fmt,
    read_readouts,
    two_sided_p,
    write_readouts,
    z_quantile,
)
from .evalreport import EvalReport, Estimates, score_against_split_b, score_against_truth
from .fitting import fit_mle2, fit_sure_gaussian
from .localh1 import PriorOdds, localh1_moments
from .posteriors import _adjusted_p, dump_prior, load_prior, parse_kv, posterior_moments
from .simlab import RMSE_UNIT, builtin_case, generate_arrays
from .splitreg import TarwesModel, read_pairs, train_second_moment, write_pairs

ADJUST_COLUMNS = ("experiment_id", "metric_id", "method", "delta_raw", "mean_adj", "var_adj",
                  "ci_low", "ci_high", "p_raw", "p_adj")
REGRESSION_METHODS = ("rwes-linear", "tarwes", "tarwes-plus")
FIT_METHODS = tuple(EB_FAMILIES) + REGRESSION_METHODS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _float_list(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="abshrink", description="Shrinkage adjustment of A/B test readouts.")
    p.add_argument("--version", action="version", version=f"abshrink {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key=value file supplying defaults for any flag")
        sp.add_argument("--seed", type=int, help="random seed (fallback: $ABSHRINK_SEED, then 0)")
        sp.add_argument("--alpha", type=float, default=0.05, help="interval level is 1 - alpha (default 0.05)")

    s = sub.add_parser("simulate", help="generate a seeded scenario")
    common(s)
    s.add_argument("--case", type=int, choices=(1, 2, 3), help="built-in scenario")
    s.add_argument("--prior", help="ground-truth prior file (instead of --case)")
    s.add_argument("--snr", type=float, help="signal-to-noise ratio recorded with --prior")
    s.add_argument("--train", type=int, default=1000, help="training experiments (default 1000)")
    s.add_argument("--test", type=int, default=1000, help="test experiments (default 1000)")
    s.add_argument("--aux-metrics", type=int, default=0, help="auxiliary metrics sharing the true effect")
    s.add_argument("--out-dir", default=".", help="directory for the CSV outputs")

    f = sub.add_parser("fit", help="fit a prior or a splitting regression")
    common(f)
    f.add_argument("--method", required=True, choices=FIT_METHODS)
    f.add_argument("--readouts", help="training readout CSV")
    f.add_argument("--pairs", help="training split-pair CSV (regression methods)")
    f.add_argument("--sure", action="store_true", help="eb-normal: choose the scale by SURE instead of MLE-II")
    f.add_argument("--second-moment", action="store_true", help="regression methods: also fit a variance model")
    f.add_argument("--out", required=True, help="prior or model file to write")
    f.add_argument("--report", help="fit report file (default: <out>.report)")

    a = sub.add_parser("adjust", help="adjust readouts")
    common(a)
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--readouts", help="readout CSV to adjust")
    a.add_argument("--pairs", help="adjust split A of a split-pair CSV instead of --readouts")
    a.add_argument("--prior", help="prior file (EB methods, theoretical)")
    a.add_argument("--model", help="regression model file")
    a.add_argument("--train-readouts", help="fit on the fly from these readouts")
    a.add_argument("--train-pairs", help="training split pairs for regression methods fitted on the fly")
    a.add_argument("--threshold", type=float, help="cmle: p-value selection threshold")
    a.add_argument("--k", type=float, help="cmle: absolute-delta selection threshold")
    a.add_argument("--prior-odds", default="1:1", help="localh1: prior odds of a real effect, a:b (default 1:1)")
    a.add_argument("--out", required=True, help="adjusted CSV to write")

    e = sub.add_parser("evaluate", help="score adjusted readouts")
    common(e)
    e.add_argument("--adjusted", required=True, help="CSV written by adjust (may hold several methods)")
    e.add_argument("--readouts", help="readouts the adjustments were computed from")
    e.add_argument("--truth", help="ground-truth CSV experiment_id,mu_true")
    e.add_argument("--pairs", help="split-pair CSV: score split-A adjustments against split B")
    e.add_argument("--thresholds", type=_float_list, default="0.01,0.05,1.0",
                   help="p-value buckets (default 0.01,0.05,1.0)")
    e.add_argument("--paper-units", action="store_true", help=f"report RMSE in units of {RMSE_UNIT}")
    e.add_argument("--out", help="report CSV (default: stdout)")
    e.add_argument("--text", action="store_true", help="also print an aligned table to stderr")
    return p


_TRUE = {"1", "true", "yes", "on"}


def _apply_config(parser: argparse.ArgumentParser, argv):
    """Parse once for ``--config``, install its values as defaults, parse again."""
    argv = list(sys.argv[1:] if argv is None else argv)
    command = next((a for a in argv if a in COMMANDS), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    if command is None or config is None:
        return parser.parse_args(argv)
    try:
        kv = parse_kv(Path(config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read config {config}: {exc}") from None
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, value in kv.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise ValidationError(f"{config}: unknown key {key!r} for {command}")
        if isinstance(actions[dest], argparse._StoreTrueAction):
            defaults[dest] = value.lower() in _TRUE
        else:
            defaults[dest] = value
    sp.set_defaults(**defaults)
    # options marked required may now be satisfied by the config file
    saved = [(a, a.required) for a in sp._actions if a.dest in defaults]
    for a, _ in saved:
        a.required = False
    try:
        return parser.parse_args(argv)
    finally:
        for a, req in saved:
            a.required = req


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise ValidationError(f"unknown command {name}")


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ABSHRINK_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(f"ABSHRINK_SEED must be an integer, got {env!r}") from None
    return 0


def _need(args, *names):
    missing = [n for n in names if not getattr(args, n.replace("-", "_"), None)]
    if missing:
        raise ConfigurationError(f"{args.command}: missing {', '.join('--' + n for n in missing)}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    seed = _seed(args)
    if args.case is not None:
        sc = builtin_case(args.case, seed=seed, n_train=args.train, n_test=args.test, aux_metrics=args.aux_metrics)
    elif args.prior:
        from .simlab import Scenario
        sc = Scenario(load_prior(_read(args.prior)), snr=args.snr or 1.0, seed=seed, n_train=args.train,
                      n_test=args.test, aux_metrics=args.aux_metrics, name="custom")
    else:
        raise ConfigurationError("simulate: give --case or --prior")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment_id", "mu_true"])
        for part in ("train", "test"):
            data = generate_arrays(sc, part)
            write_readouts(out / f"{part}_readouts.csv", data.readouts())
            write_pairs(out / f"{part}_pairs.csv", data.pairs())
            for i, m in zip(data.ids, data.mu):
                w.writerow([i, fmt(m)])
    (out / "scenario.txt").write_text(
        f"name={sc.name}\nseed={seed}\nsnr={fmt(sc.snr)}\nsigma2={fmt(sc.sigma2)}\n"
        f"n_train={sc.n_train}\nn_test={sc.n_test}\naux_metrics={sc.aux_metrics}\n"
        + "".join(f"prior.{k}={v}\n" for k, v in parse_kv(dump_prior(sc.prior)).items()),
        encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _read(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None


def _train_arrays(path):
    rs = read_readouts(path)
    return np.array([r.delta for r in rs]), np.array([r.se2 for r in rs])


def cmd_fit(args):
    report = {"method": args.method}
    if args.method in EB_FAMILIES:
        _need(args, "readouts")
        d, s = _train_arrays(args.readouts)
        if args.method == "eb-normal" and args.sure:
            from .posteriors import Gaussian
            tau2, risk = fit_sure_gaussian((d, s))
            text = dump_prior(Gaussian(tau2))
            report.update(estimator="sure", sure_risk=fmt(risk), n_used=d.size)
        else:
            res = fit_mle2((d, s), EB_FAMILIES[args.method])
            text = dump_prior(res.prior)
            report.update(estimator="mle2", loglik=fmt(res.loglik), iterations=res.iterations,
                          converged=str(res.converged).lower(), n_used=res.n_used)
            if res.sure_risk is not None:
                report["sure_risk"] = fmt(res.sure_risk)
            for i, note in enumerate(res.notes):
                report[f"note{i}"] = note.replace("\n", " ")
    else:
        _need(args, "pairs")
        pairs = read_pairs(args.pairs)
        d = s = None
        if args.method != "rwes-linear":
            _need(args, "readouts")
            d, s = _train_arrays(args.readouts)
        model = fit_method(args.method, d, s, pairs).model
        if args.second_moment:
            from dataclasses import replace
            model = replace(model, second_moment=train_second_moment(pairs, fitted_priors=model.fitted_priors))
        text = model.to_text()
        report.update(n_pairs=len(pairs), coefficients=",".join(fmt(c) for c in model.coefficients))
    Path(args.out).write_text(text, encoding="utf-8")
    Path(args.report or f"{args.out}.report").write_text("".join(f"{k}={v}\n" for k, v in report.items()),
                                                         encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# adjust
# ---------------------------------------------------------------------------

def _adjust_inputs(args):
    if args.pairs:
        pairs = read_pairs(args.pairs)
        ids = [p.experiment_id for p in pairs]
        return ids, ["split_a"] * len(ids), np.array([p.delta_a for p in pairs]), np.array([p.se2_a for p in pairs])
    _need(args, "readouts")
    rs = read_readouts(args.readouts)
    return ([r.experiment_id for r in rs], [r.metric_id for r in rs],
            np.array([r.delta for r in rs], dtype=float), np.array([r.se2 for r in rs], dtype=float))


def _adjust_arrays(args, delta, se2):
    m, alpha = args.method, args.alpha
    if m == "unadjusted":
        return fit_method(m, alpha=alpha).adjust(delta, se2)
    if m == "cmle":
        if args.k is not None:
            rule = SelectionRule.abs_delta_above(args.k)
        elif args.threshold is not None:
            rule = SelectionRule.p_below(args.threshold)
        else:
            raise ConfigurationError("cmle needs --threshold or --k")
        mean, var, lo, hi, _ = cmle_adjust(delta, se2, rule, alpha)
        return mean, var, lo, hi
    if m == "localh1":
        return fit_method(m, odds=PriorOdds.parse(args.prior_odds), alpha=alpha).adjust(delta, se2)
    if m in ("theoretical",) + tuple(EB_FAMILIES):
        if args.prior:
            prior = load_prior(_read(args.prior))
            return fit_method("theoretical", prior=prior, alpha=alpha).adjust(delta, se2)
        if m == "theoretical":
            raise ConfigurationError("theoretical needs --prior")
        _need(args, "train-readouts")
        d, s = _train_arrays(args.train_readouts)
        return fit_method(m, d, s, alpha=alpha).adjust(delta, se2)
    # regression methods
    if args.model:
        model = TarwesModel.from_text(_read(args.model))
    else:
        _need(args, "train-pairs")
        pairs = read_pairs(args.train_pairs)
        d = s = None
        if m != "rwes-linear":
            _need(args, "train-readouts")
            d, s = _train_arrays(args.train_readouts)
        model = fit_method(m, d, s, pairs).model
    mean = model.predict_mean(delta, se2)
    var = model.predict_variance(delta, se2)
    half = z_quantile(alpha) * np.sqrt(var)
    return mean, var, mean - half, mean + half


def cmd_adjust(args):
    ids, metrics, delta, se2 = _adjust_inputs(args)
    mean, var, lo, hi = _adjust_arrays(args, delta, se2)
    p_raw = np.atleast_1d(two_sided_p(delta, np.sqrt(se2))) if delta.size else np.zeros(0)
    p_adj = _adjusted_p(mean, var)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ADJUST_COLUMNS)
        for row in zip(ids, metrics, delta, mean, var, lo, hi, p_raw, p_adj):
            w.writerow([row[0], row[1], args.method] + [fmt(x) for x in row[2:]])
    return 0


def read_adjusted(path):
    """Rows of an adjust CSV grouped by method: ``{method: list of dict}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ADJUST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                parsed = {c: float(row[c]) for c in ADJUST_COLUMNS[3:]}
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            parsed.update(experiment_id=row["experiment_id"], metric_id=row["metric_id"])
            out.setdefault(row["method"], []).append(parsed)
    return out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args):
    groups = read_adjusted(args.adjusted)
    buckets = tuple(SelectionRule.all() if t >= 1 else SelectionRule.p_below(t) for t in args.thresholds)
    if args.pairs:
        pairs = read_pairs(args.pairs)
        se2_of = {p.experiment_id: p.se2_a for p in pairs}
    else:
        _need(args, "readouts", "truth")
        se2_of = {r.experiment_id: r.se2 for r in read_readouts(args.readouts)}
        truths = {}
        with open(args.truth, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    truths[row["experiment_id"]] = float(row["mu_true"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValidationError(f"{args.truth}:{lineno}: {exc}") from None
    report = EvalReport()
    for method, rows in groups.items():
        ids = [r["experiment_id"] for r in rows]
        orphans = [i for i in ids if i not in se2_of]
        if orphans:
            raise ValidationError(f"adjusted ids without a readout: {orphans[:10]}")
        est = Estimates(ids, [r["delta_raw"] for r in rows], [se2_of[i] for i in ids],
                        [r["mean_adj"] for r in rows], [r["var_adj"] for r in rows],
                        [r["ci_low"] for r in rows], [r["ci_high"] for r in rows])
        var_s = method not in ("unadjusted",) + REGRESSION_METHODS
        if args.pairs:
            report.extend(score_against_split_b(est, pairs, buckets, method=method, alpha=args.alpha, var_s=var_s))
        else:
            sub = {i: truths[i] for i in ids if i in truths}
            missing = [i for i in ids if i not in truths]
            if missing:
                raise ValidationError(f"adjusted ids without a ground truth: {missing[:10]}")
            report.extend(score_against_truth(est, sub, buckets, method=method, var_s=var_s))
    if args.paper_units:
        report = report.scaled(RMSE_UNIT)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.text:
        sys.stderr.write(report.to_text())
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "adjust": cmd_adjust, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"abshrink: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError, KeyError) as exc:
        print(f"abshrink: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
